#include "pipeline.hpp"

#include "kcrl/error.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>

using namespace kcrl;
using namespace kcrl::cli;

namespace {

struct Globals {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  bool fast = false;
};

Context make_context(const Globals& g, const std::optional<std::string>& task) {
  RunConfig c = preset(g.fast);
  if (!g.config_path.empty()) {
    std::ifstream in(g.config_path);
    if (!in) throw ConfigError("cannot open config file " + g.config_path);
    nlohmann::json doc;
    try {
      doc = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError("config file " + g.config_path + " is not valid JSON: " + e.what());
    }
    c = apply_json(c, doc);
  }
  if (g.seed) c.seed = *g.seed;
  if (g.out) c.output = *g.out;
  if (task) c.task = *task;
  c.validate();
  return {c, Layout{c.output}};
}

AgentId agent_id(const Context& ctx, const std::string& algorithm, const std::string& mve) {
  AgentId id;
  id.task = tasks::parse_task(ctx.config.task);
  id.algorithm = agents::parse_algorithm(algorithm);
  id.mve = agents::parse_mve_mode(mve);
  if (id.algorithm == agents::Algorithm::dqn && id.mve != agents::MveMode::off) {
    throw ConfigError("--mve requires a continuous algorithm");
  }
  id.seed = ctx.config.seed;
  return id;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Knowledge-tracing simulator and recommendation agents"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config_path, "JSON config file")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "Global seed override");
  app.add_option("--out", g.out, "Output directory override");
  app.add_flag("--fast", g.fast, "Desk-scale preset");

  auto* gen = app.add_subcommand("gen-corpus", "Generate the synthetic corpus and student traces");
  auto* embed = app.add_subcommand("train-embed", "Train question and KC embeddings");
  auto* embed_grp = app.add_subcommand("embed", "Embedding tools");
  auto* embed_info = embed_grp->add_subcommand("info", "Print the header of the embedding file");
  embed_grp->require_subcommand(1);
  auto* train_kt = app.add_subcommand("train-kt", "Train the knowledge-tracing model");
  auto* calib = app.add_subcommand("calibrate-kt", "Calibrate KC-level knowledge estimates");
  auto* kt_grp = app.add_subcommand("kt", "Knowledge-tracing tools");
  auto* kt_eval = kt_grp->add_subcommand("eval", "Per-step AUC contributions and KC error");
  kt_grp->require_subcommand(1);
  std::string kt_which = "calibrated";
  kt_eval->add_option("--model", kt_which, "trained or calibrated")->check(CLI::IsMember({"trained", "calibrated"}));

  std::optional<std::string> task;
  std::string algorithm = "ddpg", mve = "off", policy = "random";
  auto* train_agent = app.add_subcommand("train-agent", "Train a recommendation agent");
  train_agent->add_option("--task", task, "1-4 or global/practiced/upcoming/weakest");
  train_agent->add_option("--algorithm", algorithm, "ddpg, td3, sac or dqn");
  train_agent->add_option("--mve", mve, "off, blend or replace");
  auto* evaluate = app.add_subcommand("evaluate", "Score a policy on a task");
  evaluate->add_option("--task", task, "1-4 or global/practiced/upcoming/weakest");
  evaluate->add_option("--policy", policy, "random, historical or agent")
      ->check(CLI::IsMember({"random", "historical", "agent"}));
  evaluate->add_option("--algorithm", algorithm, "agent algorithm");
  evaluate->add_option("--mve", mve, "agent critic mode");
  auto* extend = app.add_subcommand("extend-corpus", "Extend the corpus and re-evaluate trained agents");
  auto* report = app.add_subcommand("report", "Aggregate evaluation results");

  for (auto* sub : app.get_subcommands({})) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    const Context ctx = make_context(g, task);
    if (gen->parsed()) gen_corpus(ctx);
    else if (embed->parsed()) cli::train_embed(ctx);
    else if (embed_info->parsed()) std::cout << cli::embed_info(ctx).dump(2) << "\n";
    else if (train_kt->parsed()) cli::train_kt(ctx);
    else if (calib->parsed()) calibrate_kt(ctx);
    else if (kt_eval->parsed()) cli::kt_eval(ctx, kt_which);
    else if (train_agent->parsed()) cli::train_agent(ctx, agent_id(ctx, algorithm, mve));
    else if (evaluate->parsed()) {
      std::optional<AgentId> id;
      if (policy == "agent") id = agent_id(ctx, algorithm, mve);
      cli::evaluate(ctx, tasks::parse_task(ctx.config.task), policy, id);
    } else if (extend->parsed()) extend_corpus(ctx);
    else if (report->parsed()) cli::report(ctx);
    return 0;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "kcrl: %s\n", e.what());
    return exit_code_for(e);
  }
}
