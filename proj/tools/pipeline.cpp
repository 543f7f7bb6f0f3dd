#include "pipeline.hpp"

#include "kcrl/error.hpp"
#include "kcrl/metrics.hpp"
#include "kcrl/numcore/io.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

namespace kcrl::cli {

using nlohmann::json;
using nc::Index;
using nc::Matrix;

namespace {

// Reads the keys of one config section and rejects the ones nobody asked for.
class Section {
 public:
  Section(const json& doc, std::string name) : name_(std::move(name)) {
    if (!doc.is_object()) throw ConfigError("config section '" + name_ + "' must be an object");
    doc_ = &doc;
  }

  template <typename T>
  Section& get(const std::string& key, T& dst) {
    seen_.insert(key);
    if (!doc_->contains(key)) return *this;
    try {
      dst = doc_->at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError(name_ + "." + key + " has the wrong type");
    }
    return *this;
  }

  void finish() const {
    for (const auto& [key, value] : doc_->items()) {
      if (!seen_.count(key)) throw ConfigError("unknown key " + name_ + "." + key);
    }
  }

 private:
  const json* doc_;
  std::string name_;
  std::set<std::string> seen_;
};

template <typename T>
void require_positive(const std::string& key, T v) {
  if (!(v > 0)) throw ConfigError(key + " must be positive");
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

void ensure_parent(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

void require(const fs::path& p, const std::string& producer) {
  if (!fs::exists(p)) {
    throw DataError("missing " + p.string() + "; run `kcrl " + producer + "` first");
  }
}

std::string hash_of(const fs::path& p) { return "fnv1a64:" + nc::hex64(nc::fnv1a_file(p)); }

// Read-modify-write of the run manifest; each command owns one entry.
class ManifestEntry {
 public:
  ManifestEntry(const Context& ctx, std::string key)
      : ctx_(ctx), key_(std::move(key)), start_(std::chrono::steady_clock::now()) {}

  void input(const fs::path& p) { inputs_[rel(p)] = hash_of(p); }
  void output(const fs::path& p) { outputs_[rel(p)] = hash_of(p); }
  json& metrics() { return metrics_; }

  void commit() {
    const fs::path path = ctx_.layout.manifest();
    json doc = json::object();
    if (fs::exists(path)) {
      std::ifstream in(path);
      try {
        doc = json::parse(in);
      } catch (const json::exception&) {
        doc = json::object();  // a damaged manifest is rebuilt rather than blocking the run
      }
    }
    doc["format"] = "kcrl.manifest";
    doc["version"] = 1;
    json entry;
    entry["config"] = to_json(ctx_.config);
    entry["inputs"] = inputs_;
    entry["outputs"] = outputs_;
    entry["metrics"] = metrics_;
    entry["wall_seconds"] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    doc["commands"][key_] = entry;
    nc::write_text_atomic(path, doc.dump(2) + "\n");
  }

 private:
  std::string rel(const fs::path& p) const { return fs::relative(p, ctx_.layout.root).generic_string(); }

  const Context& ctx_;
  std::string key_;
  std::chrono::steady_clock::time_point start_;
  std::map<std::string, std::string> inputs_, outputs_;
  json metrics_ = json::object();
};

struct Data {
  corpus::Corpus corpus;
  std::vector<corpus::StudentTrace> train, eval;
};

Data load_data(const Context& ctx, ManifestEntry& m) {
  const Layout& l = ctx.layout;
  for (const auto& p : {l.corpus(), l.train_traces(), l.eval_traces()}) {
    require(p, "gen-corpus");
    m.input(p);
  }
  return {corpus::load_corpus(l.corpus()), corpus::load_traces(l.train_traces()), corpus::load_traces(l.eval_traces())};
}

embed::EmbeddingSpace load_space_checked(const Context& ctx, ManifestEntry& m) {
  require(ctx.layout.space(), "train-embed");
  m.input(ctx.layout.space());
  return embed::load_space(ctx.layout.space());
}

kt::KTModel load_calibrated(const Context& ctx, ManifestEntry& m) {
  require(ctx.layout.kt_calibrated(), "calibrate-kt");
  m.input(ctx.layout.kt_calibrated());
  return kt::load_model(ctx.layout.kt_calibrated());
}

std::vector<corpus::StudentTrace> head(const std::vector<corpus::StudentTrace>& v, int n) {
  return {v.begin(), v.begin() + std::min<std::ptrdiff_t>(n, static_cast<std::ptrdiff_t>(v.size()))};
}

void write_scores(const fs::path& path, tasks::TaskKind task, const std::string& label,
                  const tasks::EvalResult& result) {
  std::ostringstream out;
  tasks::append_score_csv(out, task, label, result, true);
  nc::write_text_atomic(path, out.str());
}

json summary_json(const tasks::Summary& s) {
  return {{"mean", s.mean}, {"std", s.std}, {"ci_lo", s.ci.lo}, {"ci_hi", s.ci.hi}, {"n", s.n}};
}

// One bootstrap stream for every reported interval, so evaluate and report agree.
constexpr std::uint64_t kSummarySeed = 0xC1;

AgentId read_agent_info(const fs::path& p) {
  std::ifstream in(p);
  const json j = json::parse(in);
  AgentId id;
  id.task = tasks::parse_task(j.at("task").get<std::string>());
  id.algorithm = agents::parse_algorithm(j.at("algorithm").get<std::string>());
  id.mve = agents::parse_mve_mode(j.at("mve").get<std::string>());
  id.seed = j.at("seed").get<std::uint64_t>();
  return id;
}

std::vector<AgentId> trained_agents(const Layout& l) {
  std::vector<AgentId> out;
  const fs::path dir = l.root / "agents";
  if (!fs::exists(dir)) return out;
  std::vector<fs::path> infos;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.path().extension() == ".json") infos.push_back(e.path());
  }
  std::sort(infos.begin(), infos.end());
  for (const auto& p : infos) out.push_back(read_agent_info(p));
  return out;
}

std::uint64_t policy_seed(const AgentId& id) { return derive_seed(id.seed, 0xE7A1); }

}  // namespace

// ---------------------------------------------------------------------------
// Config.

void RunConfig::validate() const {
  if (corpus.num_kcs < 5) throw ConfigError("corpus.num_kcs must be at least 5");
  if (corpus.num_questions < corpus.num_kcs) throw ConfigError("corpus.num_questions must be >= corpus.num_kcs");
  require_positive("corpus.train_students", corpus.train_students);
  require_positive("corpus.eval_students", corpus.eval_students);
  require_positive("corpus.extend_factor", corpus.extend_factor);
  if (corpus.trace_length < env.warmup + env.horizon) {
    throw ConfigError("corpus.trace_length must be at least env.warmup + env.horizon");
  }
  require_positive("embed.dim", embed.encoder.dim);
  require_positive("embed.token_dim", embed.encoder.token_dim);
  require_positive("embed.tau", embed.tau);
  require_positive("embed.batch_size", embed.batch_size);
  require_positive("embed.max_epochs", embed.max_epochs);
  require_positive("embed.patience", embed.patience);
  require_positive("embed.learning_rate", embed.learning_rate);
  if (!(embed.cluster_threshold >= 0.0)) throw ConfigError("embed.cluster_threshold must be >= 0");
  require_positive("kt.state_dim", kt.state_dim);
  require_positive("kt.hidden_dim", kt.hidden_dim);
  require_positive("kt.epochs", kt.train.epochs);
  require_positive("kt.batch_size", kt.train.batch_size);
  require_positive("kt.learning_rate", kt.train.learning_rate);
  require_positive("kt.calib_epochs", kt.calibration.epochs);
  require_positive("kt.calib_batch_size", kt.calibration.batch_size);
  require_positive("kt.calib_learning_rate", kt.calibration.learning_rate);
  if (!(kt.calibration.kc_weight >= 0.0)) throw ConfigError("kt.kc_weight must be >= 0");
  require_positive("kt.oracle_samples", kt.calibration.sample_size);
  require_positive("kt.mae_students", kt.mae_students);
  try {
    env.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("env: ") + e.what());
  }
  agent.validate();
  try {
    tasks::parse_task(task);
  } catch (const ConfigError&) {
    throw ConfigError("task must be 1-4 or global/practiced/upcoming/weakest, got '" + task + "'");
  }
  if (output.empty()) throw ConfigError("output must name a directory");
}

RunConfig preset(bool fast) {
  RunConfig c;
  if (fast) return c;
  // Wider critic, more students and longer training; hours on one core.
  c.corpus.train_students = 1024;
  c.agent.critic_up = 1200;
  c.agent.critic_hidden = 300;
  c.agent.epochs = 1000;
  return c;
}

RunConfig apply_json(RunConfig c, const json& doc) {
  if (!doc.is_object()) throw ConfigError("config must be a JSON object");
  for (const auto& [key, value] : doc.items()) {
    if (key == "seed") {
      if (!value.is_number_unsigned()) throw ConfigError("seed must be a non-negative integer");
      c.seed = value.get<std::uint64_t>();
    } else if (key == "task") {
      if (!value.is_string() && !value.is_number_integer()) throw ConfigError("task has the wrong type");
      c.task = value.is_string() ? value.get<std::string>() : std::to_string(value.get<int>());
    } else if (key == "output") {
      Section s(value, "output");
      s.get("dir", c.output).finish();
    } else if (key == "corpus") {
      Section s(value, "corpus");
      auto& k = c.corpus;
      s.get("num_kcs", k.num_kcs).get("num_questions", k.num_questions).get("seed", k.seed);
      s.get("train_students", k.train_students).get("eval_students", k.eval_students);
      s.get("trace_length", k.trace_length).get("population_seed", k.population_seed);
      s.get("extend_factor", k.extend_factor).get("extend_seed", k.extend_seed).finish();
    } else if (key == "embed") {
      Section s(value, "embed");
      auto& e = c.embed;
      s.get("dim", e.encoder.dim).get("token_dim", e.encoder.token_dim).get("tau", e.tau);
      s.get("batch_size", e.batch_size).get("max_epochs", e.max_epochs).get("patience", e.patience);
      s.get("min_improvement", e.min_improvement).get("learning_rate", e.learning_rate);
      s.get("cluster_threshold", e.cluster_threshold).get("seed", e.seed).finish();
    } else if (key == "kt") {
      Section s(value, "kt");
      auto& k = c.kt;
      s.get("state_dim", k.state_dim).get("hidden_dim", k.hidden_dim).get("init_seed", k.init_seed);
      s.get("epochs", k.train.epochs).get("batch_size", k.train.batch_size);
      s.get("learning_rate", k.train.learning_rate).get("max_grad_norm", k.train.max_grad_norm);
      s.get("train_seed", k.train.seed);
      s.get("calib_epochs", k.calibration.epochs).get("calib_batch_size", k.calibration.batch_size);
      s.get("calib_learning_rate", k.calibration.learning_rate).get("kc_weight", k.calibration.kc_weight);
      s.get("oracle_samples", k.calibration.sample_size).get("calib_seed", k.calibration.seed);
      s.get("teacher_seed", k.teacher_seed).get("oracle_seed", k.oracle_seed).get("mae_students", k.mae_students);
      s.finish();
    } else if (key == "env") {
      Section s(value, "env");
      auto& e = c.env;
      s.get("horizon", e.horizon).get("warmup", e.warmup).get("reward_scale", e.reward_scale);
      s.get("gamma", e.gamma).get("seed", e.seed).finish();
    } else if (key == "agent") {
      if (!value.is_object()) throw ConfigError("config section 'agent' must be an object");
      json merged = agents::to_json(c.agent);
      for (const auto& [k, v] : value.items()) merged[k] = v;
      for (const auto& [k, v] : value.items()) {
        if (!agents::to_json(agents::AgentConfig{}).contains(k)) throw ConfigError("unknown key agent." + k);
      }
      c.agent = agents::agent_config_from_json(merged);
    } else {
      throw ConfigError("unknown config section '" + key + "'");
    }
  }
  return c;
}

json to_json(const RunConfig& c) {
  const auto& k = c.kt;
  return {
      {"seed", c.seed},
      {"task", c.task},
      {"output", {{"dir", c.output}}},
      {"corpus",
       {{"num_kcs", c.corpus.num_kcs},
        {"num_questions", c.corpus.num_questions},
        {"seed", c.corpus.seed},
        {"train_students", c.corpus.train_students},
        {"eval_students", c.corpus.eval_students},
        {"trace_length", c.corpus.trace_length},
        {"population_seed", c.corpus.population_seed},
        {"extend_factor", c.corpus.extend_factor},
        {"extend_seed", c.corpus.extend_seed}}},
      {"embed",
       {{"dim", c.embed.encoder.dim},
        {"token_dim", c.embed.encoder.token_dim},
        {"tau", c.embed.tau},
        {"batch_size", c.embed.batch_size},
        {"max_epochs", c.embed.max_epochs},
        {"patience", c.embed.patience},
        {"min_improvement", c.embed.min_improvement},
        {"learning_rate", c.embed.learning_rate},
        {"cluster_threshold", c.embed.cluster_threshold},
        {"seed", c.embed.seed}}},
      {"kt",
       {{"state_dim", k.state_dim},
        {"hidden_dim", k.hidden_dim},
        {"init_seed", k.init_seed},
        {"epochs", k.train.epochs},
        {"batch_size", k.train.batch_size},
        {"learning_rate", k.train.learning_rate},
        {"max_grad_norm", k.train.max_grad_norm},
        {"train_seed", k.train.seed},
        {"calib_epochs", k.calibration.epochs},
        {"calib_batch_size", k.calibration.batch_size},
        {"calib_learning_rate", k.calibration.learning_rate},
        {"kc_weight", k.calibration.kc_weight},
        {"oracle_samples", k.calibration.sample_size},
        {"calib_seed", k.calibration.seed},
        {"teacher_seed", k.teacher_seed},
        {"oracle_seed", k.oracle_seed},
        {"mae_students", k.mae_students}}},
      {"env",
       {{"horizon", c.env.horizon},
        {"warmup", c.env.warmup},
        {"reward_scale", c.env.reward_scale},
        {"gamma", c.env.gamma},
        {"seed", c.env.seed}}},
      {"agent", agents::to_json(c.agent)},
  };
}

std::string AgentId::label() const {
  std::string s = agents::algorithm_name(algorithm);
  if (mve == agents::MveMode::blend) s += "+mve";
  if (mve == agents::MveMode::replace) s += "+mve-replace";
  return s;
}

std::string AgentId::name() const {
  return "task" + std::to_string(static_cast<int>(task)) + "_" + label() + "_s" + std::to_string(seed);
}

fs::path Layout::scores(tasks::TaskKind task, const std::string& policy, std::uint64_t seed) const {
  return root / "eval" / ("task" + std::to_string(static_cast<int>(task)) + "_" + policy + "_s" + std::to_string(seed) + ".csv");
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const TrainingError*>(&e)) return 4;
  if (dynamic_cast<const ConfigError*>(&e)) return 2;
  if (dynamic_cast<const DataError*>(&e) || dynamic_cast<const DimensionError*>(&e) ||
      dynamic_cast<const ProtocolError*>(&e)) {
    return 3;
  }
  return 1;
}

// ---------------------------------------------------------------------------
// Commands.

void gen_corpus(const Context& ctx) {
  ManifestEntry m(ctx, "gen-corpus");
  const auto& cc = ctx.config.corpus;
  corpus::GeneratorConfig g;
  g.num_kcs = cc.num_kcs;
  g.num_questions = cc.num_questions;
  g.seed = cc.seed;
  const corpus::Corpus c = corpus::generate_corpus(g);
  const auto train = corpus::simulate_population(c, cc.train_students, cc.trace_length,
                                                 derive_seed(cc.population_seed, 1), 0);
  const auto eval = corpus::simulate_population(c, cc.eval_students, cc.trace_length,
                                                derive_seed(cc.population_seed, 2), 100000);
  const Layout& l = ctx.layout;
  for (const auto& p : {l.corpus(), l.train_traces(), l.eval_traces()}) ensure_parent(p);
  corpus::save_corpus(l.corpus(), c);
  corpus::save_traces(l.train_traces(), train);
  corpus::save_traces(l.eval_traces(), eval);
  for (const auto& p : {l.corpus(), l.train_traces(), l.eval_traces()}) m.output(p);
  double correct = 0.0, total = 0.0;
  for (const auto& t : train) {
    for (const auto& s : t.steps) {
      correct += s.response;
      total += 1.0;
    }
  }
  m.metrics() = {{"num_kcs", c.num_kcs()},
                 {"num_questions", c.num_questions()},
                 {"train_students", train.size()},
                 {"eval_students", eval.size()},
                 {"train_correct_rate", correct / total}};
  m.commit();
  std::printf("corpus: %d KCs, %d questions; %zu train and %zu eval students\n", c.num_kcs(), c.num_questions(),
              train.size(), eval.size());
}

void train_embed(const Context& ctx) {
  ManifestEntry m(ctx, "train-embed");
  require(ctx.layout.corpus(), "gen-corpus");
  m.input(ctx.layout.corpus());
  const corpus::Corpus c = corpus::load_corpus(ctx.layout.corpus());
  embed::EmbedTrainReport rep;
  const fs::path diverged = ctx.layout.root / "embed" / "diverged.bin";
  ensure_parent(diverged);
  const embed::EmbeddingSpace space = embed::train_embeddings(c, ctx.config.embed, &rep, diverged);
  embed::save_space(ctx.layout.space(), space);
  const double final_loss = rep.epoch_loss.empty() ? 0.0 : rep.epoch_loss.back();
  nc::write_text_atomic(ctx.layout.embed_metrics(),
                        "f1_before,f1_after,num_clusters,epochs,final_loss\n" + fmt(rep.f1_before) + "," +
                            fmt(rep.f1_after) + "," + std::to_string(rep.num_clusters) + "," +
                            std::to_string(rep.epoch_loss.size()) + "," + fmt(final_loss) + "\n");
  m.output(ctx.layout.space());
  m.output(ctx.layout.embed_metrics());
  m.metrics() = {{"f1_before", rep.f1_before}, {"f1_after", rep.f1_after}, {"num_clusters", rep.num_clusters}};
  m.commit();
  std::printf("embeddings: retrieval F1 %.4f -> %.4f over %zu epochs\n", rep.f1_before, rep.f1_after,
              rep.epoch_loss.size());
}

json embed_info(const Context& ctx) {
  require(ctx.layout.space(), "train-embed");
  return embed::space_info(ctx.layout.space());
}

void train_kt(const Context& ctx) {
  ManifestEntry m(ctx, "train-kt");
  const Data d = load_data(ctx, m);
  const auto space = load_space_checked(ctx, m);
  const Matrix fused = space.fused_all();
  const auto& k = ctx.config.kt;
  kt::KTModel model(space.dim, k.state_dim, k.hidden_dim, k.init_seed);
  const kt::TrainLog log = kt::train_kt(model, d.train, fused, k.train);
  kt::save_model(ctx.layout.kt_trained(), model, {{"epoch_loss", log.epoch_loss}, {"config", to_json(ctx.config)["kt"]}});
  std::string csv = "epoch,loss\n";
  for (std::size_t e = 0; e < log.epoch_loss.size(); ++e) csv += std::to_string(e + 1) + "," + fmt(log.epoch_loss[e]) + "\n";
  nc::write_text_atomic(ctx.layout.kt_train_metrics(), csv);
  const double auc = kt::heldout_auc(model, d.eval, fused);
  m.output(ctx.layout.kt_trained());
  m.output(ctx.layout.kt_train_metrics());
  m.metrics() = {{"heldout_auc", auc}, {"final_loss", log.epoch_loss.back()}};
  m.commit();
  std::printf("kt: held-out AUC %.4f after %zu epochs\n", auc, log.epoch_loss.size());
}

void calibrate_kt(const Context& ctx) {
  ManifestEntry m(ctx, "calibrate-kt");
  const Data d = load_data(ctx, m);
  const auto space = load_space_checked(ctx, m);
  require(ctx.layout.kt_trained(), "train-kt");
  m.input(ctx.layout.kt_trained());
  const kt::KTModel trained = kt::load_model(ctx.layout.kt_trained());
  const Matrix fused = space.fused_all();
  const auto& k = ctx.config.kt;
  const auto teacher = kt::make_teacher(trained, d.corpus, k.calibration.sample_size, k.teacher_seed);
  kt::KTModel calibrated = trained;
  const kt::TrainLog log = kt::calibrate_kt(calibrated, d.train, fused, space.kcs, teacher, k.calibration);
  kt::save_model(ctx.layout.kt_calibrated(), calibrated,
                 {{"epoch_loss", log.epoch_loss}, {"epoch_kc_loss", log.epoch_kc_loss}});

  const kt::OracleSampler sampler(d.corpus, k.calibration.sample_size, k.oracle_seed);
  const auto mae_traces = head(d.eval, k.mae_students);
  const double mae_before = kt::kc_mae(trained, mae_traces, fused, space.kcs, sampler);
  const double mae_after = kt::kc_mae(calibrated, mae_traces, fused, space.kcs, sampler);
  const double auc_before = kt::heldout_auc(trained, d.eval, fused);
  const double auc_after = kt::heldout_auc(calibrated, d.eval, fused);
  nc::write_text_atomic(ctx.layout.kt_calibration_metrics(),
                        "metric,trained,calibrated\nheldout_auc," + fmt(auc_before) + "," + fmt(auc_after) +
                            "\nkc_mae," + fmt(mae_before) + "," + fmt(mae_after) + "\n");
  m.output(ctx.layout.kt_calibrated());
  m.output(ctx.layout.kt_calibration_metrics());
  m.metrics() = {{"auc_before", auc_before}, {"auc_after", auc_after}, {"mae_before", mae_before},
                 {"mae_after", mae_after}};
  m.commit();
  std::printf("calibration: KC MAE %.4f -> %.4f (%.1f%% lower); AUC %.4f -> %.4f\n", mae_before, mae_after,
              100.0 * (1.0 - mae_after / mae_before), auc_before, auc_after);
}

void kt_eval(const Context& ctx, const std::string& which) {
  if (which != "trained" && which != "calibrated") throw ConfigError("--model must be trained or calibrated");
  ManifestEntry m(ctx, "kt-eval " + which);
  const Data d = load_data(ctx, m);
  const auto space = load_space_checked(ctx, m);
  const fs::path path = which == "trained" ? ctx.layout.kt_trained() : ctx.layout.kt_calibrated();
  require(path, which == "trained" ? "train-kt" : "calibrate-kt");
  m.input(path);
  const kt::KTModel model = kt::load_model(path);
  const Matrix fused = space.fused_all();
  const kt::Predictions p = kt::predict_traces(model, d.eval, fused);
  const auto contrib = metrics::auc_contributions(p.prob, p.label);
  const kt::OracleSampler sampler(d.corpus, ctx.config.kt.calibration.sample_size, ctx.config.kt.oracle_seed);
  std::vector<double> per_step;
  const double mae = kt::kc_mae(model, d.eval, fused, space.kcs, sampler, &per_step);
  if (per_step.size() != p.prob.size()) throw DataError("kt eval: prediction and knowledge rows do not align");
  std::string csv = "student_id,step,auc_contrib,kc_mae\n";
  for (std::size_t i = 0; i < p.prob.size(); ++i) {
    csv += std::to_string(p.student[i]) + "," + std::to_string(p.step[i]) + "," + fmt(contrib[i]) + "," +
           fmt(per_step[i]) + "\n";
  }
  nc::write_text_atomic(ctx.layout.kt_eval(which), csv);
  double auc = 0.0;
  for (double c : contrib) auc += c;
  m.output(ctx.layout.kt_eval(which));
  m.metrics() = {{"auc", auc}, {"kc_mae", mae}};
  m.commit();
  std::printf("kt eval (%s): AUC %.4f, KC MAE %.4f\n", which.c_str(), auc, mae);
}

namespace {

env::Environment make_env(const Context& ctx, const kt::KTModel& model, const embed::EmbeddingSpace& space) {
  return env::Environment(model, space.fused_all(), space.kcs, ctx.config.env);
}

}  // namespace

void train_agent(const Context& ctx, const AgentId& id) {
  ManifestEntry m(ctx, "train-agent " + id.name());
  const Data d = load_data(ctx, m);
  const auto space = load_space_checked(ctx, m);
  const kt::KTModel model = load_calibrated(ctx, m);
  const env::Environment env = make_env(ctx, model, space);
  const auto matrix = tasks::build_transition_matrix(d.corpus, d.train, ctx.config.env.warmup);
  agents::AgentConfig cfg = ctx.config.agent;
  cfg.algorithm = id.algorithm;
  cfg.mve = id.mve;
  cfg.seed = id.seed;
  const fs::path diverged = ctx.layout.root / "agents" / (id.name() + ".diverged.bin");
  ensure_parent(diverged);
  auto result = agents::train_agent(env, d.corpus, d.train, d.eval, id.task, &matrix, cfg, diverged);
  agents::save_agent(ctx.layout.agent(id), result.agent);
  agents::write_curve_csv(ctx.layout.curve(id), result.curve);
  const json info = {{"task", tasks::task_name(id.task)},
                     {"algorithm", agents::algorithm_name(id.algorithm)},
                     {"mve", agents::mve_mode_name(id.mve)},
                     {"seed", id.seed},
                     {"label", id.label()}};
  nc::write_text_atomic(ctx.layout.agent_info(id), info.dump(2) + "\n");
  m.output(ctx.layout.agent(id));
  m.output(ctx.layout.curve(id));
  const auto& last = result.curve.back();
  json seconds = json::array();
  for (const auto& p : result.curve) seconds.push_back(p.wall_seconds);
  m.metrics() = {{"final_mean_score", last.mean_score},
                 {"final_std", last.std},
                 {"updates", result.agent.updates()},
                 {"curve_wall_seconds", seconds}};
  m.commit();
  std::printf("%s: final evaluation score %.3f%% (sd %.3f)\n", id.name().c_str(), last.mean_score, last.std);
}

void evaluate(const Context& ctx, tasks::TaskKind task, const std::string& policy, const std::optional<AgentId>& agent) {
  const std::uint64_t seed = policy == "agent" ? agent->seed : ctx.config.seed;
  const std::string label = policy == "agent" ? agent->label() : policy;
  ManifestEntry m(ctx, "evaluate " + ctx.layout.scores(task, label, seed).stem().string());
  const Data d = load_data(ctx, m);
  const auto space = load_space_checked(ctx, m);
  const kt::KTModel model = load_calibrated(ctx, m);
  const env::Environment env = make_env(ctx, model, space);
  const auto matrix = tasks::build_transition_matrix(d.corpus, d.train, ctx.config.env.warmup);
  const std::uint64_t target_seed = ctx.config.env.seed;

  tasks::EvalResult r;
  if (policy == "random") {
    r = tasks::baseline_random(env, d.corpus, d.eval, task, &matrix, derive_seed(seed, 0xBA5E), target_seed);
  } else if (policy == "historical") {
    r = tasks::baseline_historical(env, d.corpus, d.eval, task, &matrix, target_seed);
  } else if (policy == "agent") {
    AgentId id = *agent;
    id.task = task;
    const fs::path path = ctx.layout.agent(id);
    require(path, "train-agent --task " + std::to_string(static_cast<int>(task)) + " --algorithm " +
                      agents::algorithm_name(id.algorithm) + " --mve " + agents::mve_mode_name(id.mve) +
                      " --seed " + std::to_string(id.seed));
    m.input(path);
    const agents::Agent a = agents::load_agent(path);
    if (a.shape().obs_dim != env.observation_dim() || a.shape().num_questions != env.num_questions()) {
      throw DimensionError("agent " + id.name() + " was trained on a different environment");
    }
    r = tasks::evaluate_policy(env, d.corpus, d.eval, task, &matrix, a.policy(policy_seed(id)), true, target_seed);
  } else {
    throw ConfigError("--policy must be random, historical or agent");
  }
  const fs::path out = ctx.layout.scores(task, label, seed);
  ensure_parent(out);
  write_scores(out, task, label, r);
  const fs::path traj = out.parent_path() / (out.stem().string() + "_trajectory.csv");
  env::write_trajectory_csv(traj, r.trajectory);
  const tasks::Summary s = tasks::summarize(r.normalized, kSummarySeed);
  m.output(out);
  m.output(traj);
  m.metrics() = summary_json(s);
  m.commit();
  std::printf("task %d %s: %.3f%% [%.3f, %.3f] over %zu students\n", static_cast<int>(task), label.c_str(), s.mean,
              s.ci.lo, s.ci.hi, s.n);
}

void extend_corpus(const Context& ctx) {
  ManifestEntry m(ctx, "extend-corpus");
  const Data d = load_data(ctx, m);
  const auto space = load_space_checked(ctx, m);
  const kt::KTModel model = load_calibrated(ctx, m);
  const auto& cc = ctx.config.corpus;
  const corpus::Corpus ext = corpus::extend_corpus(d.corpus, cc.extend_factor, cc.extend_seed);
  ensure_parent(ctx.layout.extended_corpus());
  corpus::save_corpus(ctx.layout.extended_corpus(), ext);
  // The frozen encoder places the new questions; nothing is retrained.
  const embed::EmbeddingSpace ext_space = embed::embed_corpus(space.encoder, ext, space.clusters);
  embed::save_space(ctx.layout.extended_space(), ext_space);
  m.output(ctx.layout.extended_corpus());
  m.output(ctx.layout.extended_space());

  const env::Environment original = make_env(ctx, model, space);
  const env::Environment extended = make_env(ctx, model, ext_space);
  const auto matrix = tasks::build_transition_matrix(d.corpus, d.train, ctx.config.env.warmup);
  const auto ext_matrix = tasks::build_transition_matrix(ext, d.train, ctx.config.env.warmup);
  const std::uint64_t target_seed = ctx.config.env.seed;

  std::ostringstream scores;
  std::string summary = "agent,task,policy,seed,original_mean,extended_mean,drop\n";
  bool header = true;
  int evaluated = 0;
  for (const AgentId& id : trained_agents(ctx.layout)) {
    if (id.algorithm == agents::Algorithm::dqn) continue;  // a fixed-width Q head cannot score new questions
    m.input(ctx.layout.agent(id));
    const agents::Agent a = agents::load_agent(ctx.layout.agent(id));
    const auto r0 = tasks::evaluate_policy(original, d.corpus, d.eval, id.task, &matrix, a.policy(policy_seed(id)),
                                           true, target_seed);
    const auto r1 = tasks::evaluate_policy(extended, ext, d.eval, id.task, &ext_matrix, a.policy(policy_seed(id)),
                                           true, target_seed);
    tasks::append_score_csv(scores, id.task, id.name() + "@original", r0, header);
    tasks::append_score_csv(scores, id.task, id.name() + "@extended", r1, false);
    header = false;
    const double m0 = metrics::mean(r0.normalized), m1 = metrics::mean(r1.normalized);
    summary += id.name() + "," + tasks::task_name(id.task) + "," + id.label() + "," + std::to_string(id.seed) + "," +
               fmt(m0) + "," + fmt(m1) + "," + fmt(m0 - m1) + "\n";
    std::printf("%s: %.3f%% on the original corpus, %.3f%% on the extended one\n", id.name().c_str(), m0, m1);
    ++evaluated;
  }
  nc::write_text_atomic(ctx.layout.extended_scores(), scores.str());
  nc::write_text_atomic(ctx.layout.extended_summary(), summary);
  m.output(ctx.layout.extended_scores());
  m.output(ctx.layout.extended_summary());
  m.metrics() = {{"num_questions", ext.num_questions()}, {"agents_evaluated", evaluated}};
  m.commit();
  std::printf("extended corpus: %d questions (%d originals)\n", ext.num_questions(), ext.original_count);
}

void report(const Context& ctx) {
  ManifestEntry m(ctx, "report");
  const fs::path dir = ctx.layout.root / "eval";
  if (!fs::exists(dir)) throw DataError("no evaluation results under " + dir.string() + "; run `kcrl evaluate` first");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    const std::string stem = e.path().stem().string();
    if (e.path().extension() == ".csv" && stem.find("_trajectory") == std::string::npos) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw DataError("no evaluation results under " + dir.string() + "; run `kcrl evaluate` first");

  std::string csv = "task,policy,source,n,mean,std,ci_lo,ci_hi\n";
  std::printf("%-12s %-16s %-28s %6s %8s %18s\n", "task", "policy", "source", "n", "mean", "95% CI");
  for (const fs::path& f : files) {
    m.input(f);
    std::ifstream in(f);
    std::string line;
    std::getline(in, line);
    std::string task, policy;
    std::vector<double> values;
    while (std::getline(in, line)) {
      std::stringstream ss(line);
      std::string cell;
      std::vector<std::string> cells;
      while (std::getline(ss, cell, ',')) cells.push_back(cell);
      if (cells.size() != 5) throw ParseError("expected 5 columns in " + f.string(), static_cast<long>(values.size()) + 2);
      task = cells[0];
      policy = cells[1];
      values.push_back(std::stod(cells[4]));
    }
    const tasks::Summary s = tasks::summarize(values, kSummarySeed);
    csv += task + "," + policy + "," + f.stem().string() + "," + std::to_string(s.n) + "," + fmt(s.mean) + "," +
           fmt(s.std) + "," + fmt(s.ci.lo) + "," + fmt(s.ci.hi) + "\n";
    std::printf("%-12s %-16s %-28s %6zu %8.2f   [%6.2f, %6.2f]\n", task.c_str(), policy.c_str(),
                f.stem().string().c_str(), s.n, s.mean, s.ci.lo, s.ci.hi);
  }
  nc::write_text_atomic(ctx.layout.report_summary(), csv);
  m.output(ctx.layout.report_summary());

  // Knowledge of every KC along one weakest-KC episode, per policy.
  const Data d = load_data(ctx, m);
  const auto space = load_space_checked(ctx, m);
  const kt::KTModel model = load_calibrated(ctx, m);
  const env::Environment env = make_env(ctx, model, space);
  const std::vector<corpus::StudentTrace> one = head(d.eval, 1);
  std::vector<std::pair<std::string, env::Policy>> policies;
  policies.emplace_back("random", tasks::random_policy(env.num_questions(), derive_seed(ctx.config.seed, 0xBA5E)));
  std::vector<agents::Agent> loaded;
  std::vector<AgentId> ids;
  for (const AgentId& id : trained_agents(ctx.layout)) {
    if (id.task == tasks::TaskKind::weakest) ids.push_back(id);
  }
  loaded.reserve(ids.size());
  for (const AgentId& id : ids) {
    m.input(ctx.layout.agent(id));
    loaded.push_back(agents::load_agent(ctx.layout.agent(id)));
    policies.emplace_back(id.name(), loaded.back().policy(policy_seed(id)));
  }
  std::string evo = "policy,student_id,step,question_id,target_kc,kc,knowledge\n";
  for (const auto& [name, policy] : policies) {
    env::EnvState st = env.reset(one, {}, env::TargetRule::weakest);
    auto dump = [&](int step, int question, int target) {
      for (Index k = 0; k < env.num_kcs(); ++k) {
        evo += name + "," + std::to_string(st.student_ids[0]) + "," + std::to_string(step) + "," +
               std::to_string(question) + "," + std::to_string(target) + "," + std::to_string(k) + "," +
               fmt(st.kc_knowledge(0, k)) + "\n";
      }
    };
    dump(0, -1, -1);
    while (!st.done) {
      env::Action a = policy(st, env.observation(st));
      if (a.questions.empty()) a.questions = env::nearest_questions(env.questions(), a.vectors);
      const auto out = env.step_questions(st, a.questions);
      dump(st.step, out.question[0], out.target_kc[0]);
    }
  }
  nc::write_text_atomic(ctx.layout.report_evolution(), evo);
  m.output(ctx.layout.report_evolution());
  m.metrics() = {{"result_files", files.size()}, {"evolution_policies", policies.size()}};
  m.commit();
}

}  // namespace kcrl::cli
