#pragma once

#include "kcrl/agents.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

namespace kcrl::cli {

namespace fs = std::filesystem;

struct CorpusSection {
  int num_kcs = 20;
  int num_questions = 200;
  std::uint64_t seed = 7;
  int train_students = 256;
  int eval_students = 256;
  int trace_length = 110;
  std::uint64_t population_seed = 100;
  int extend_factor = 3;
  std::uint64_t extend_seed = 17;
};

struct KtSection {
  int state_dim = 64;
  int hidden_dim = 64;
  std::uint64_t init_seed = 1;
  kt::TrainConfig train;
  kt::CalibrationConfig calibration;
  std::uint64_t teacher_seed = 3;
  std::uint64_t oracle_seed = 3;
  int mae_students = 128;  // evaluation students used for the KC-level MAE
};

struct RunConfig {
  std::uint64_t seed = 1;  // agent training and baseline streams
  CorpusSection corpus;
  embed::EmbedConfig embed;
  KtSection kt;
  env::EnvConfig env;
  agents::AgentConfig agent;
  std::string task = "global";
  std::string output = "runs/kcrl";

  /// Throws ConfigError naming the offending key.
  void validate() const;
};

/// Desk-scale preset (--fast) or the larger default.
RunConfig preset(bool fast);
/// Applies a JSON document on top of `base`. Unknown sections or keys raise ConfigError.
RunConfig apply_json(RunConfig base, const nlohmann::json& doc);
nlohmann::json to_json(const RunConfig& config);

/// Identifies a trained agent: task, algorithm, critic mode and seed.
struct AgentId {
  tasks::TaskKind task = tasks::TaskKind::global;
  agents::Algorithm algorithm = agents::Algorithm::ddpg;
  agents::MveMode mve = agents::MveMode::off;
  std::uint64_t seed = 1;

  /// e.g. "task1_ddpg+mve_s2".
  std::string name() const;
  /// Policy label without the seed, e.g. "ddpg+mve".
  std::string label() const;
};

/// Artifact layout under the output directory.
struct Layout {
  fs::path root;

  fs::path corpus() const { return root / "corpus" / "corpus.jsonl"; }
  fs::path train_traces() const { return root / "corpus" / "train_traces.txt"; }
  fs::path eval_traces() const { return root / "corpus" / "eval_traces.txt"; }
  fs::path space() const { return root / "embed" / "space.bin"; }
  fs::path embed_metrics() const { return root / "embed" / "metrics.csv"; }
  fs::path kt_trained() const { return root / "kt" / "trained.bin"; }
  fs::path kt_calibrated() const { return root / "kt" / "calibrated.bin"; }
  fs::path kt_train_metrics() const { return root / "kt" / "train_metrics.csv"; }
  fs::path kt_calibration_metrics() const { return root / "kt" / "calibration.csv"; }
  fs::path kt_eval(const std::string& which) const { return root / "kt" / ("eval_" + which + ".csv"); }
  fs::path agent(const AgentId& id) const { return root / "agents" / (id.name() + ".bin"); }
  fs::path agent_info(const AgentId& id) const { return root / "agents" / (id.name() + ".json"); }
  fs::path curve(const AgentId& id) const { return root / "agents" / (id.name() + "_curve.csv"); }
  fs::path scores(tasks::TaskKind task, const std::string& policy, std::uint64_t seed) const;
  fs::path extended_corpus() const { return root / "extended" / "corpus.jsonl"; }
  fs::path extended_space() const { return root / "extended" / "space.bin"; }
  fs::path extended_scores() const { return root / "extended" / "scores.csv"; }
  fs::path extended_summary() const { return root / "extended" / "summary.csv"; }
  fs::path report_summary() const { return root / "report" / "summary.csv"; }
  fs::path report_evolution() const { return root / "report" / "knowledge_evolution.csv"; }
  fs::path manifest() const { return root / "manifest.json"; }
};

struct Context {
  RunConfig config;
  Layout layout;
};

// Commands. Each reads its inputs from files, writes its outputs atomically
// and records hashes, timings and metrics in the manifest.
void gen_corpus(const Context& ctx);
void train_embed(const Context& ctx);
nlohmann::json embed_info(const Context& ctx);
void train_kt(const Context& ctx);
void calibrate_kt(const Context& ctx);
/// which = "trained" or "calibrated".
void kt_eval(const Context& ctx, const std::string& which);
void train_agent(const Context& ctx, const AgentId& id);
/// policy = "random", "historical" or "agent" (then `agent` names the checkpoint).
void evaluate(const Context& ctx, tasks::TaskKind task, const std::string& policy, const std::optional<AgentId>& agent);
void extend_corpus(const Context& ctx);
void report(const Context& ctx);

/// Process exit code for an exception: 2 config, 3 data, 4 training divergence, 1 otherwise.
int exit_code_for(const std::exception& e);

}  // namespace kcrl::cli
