// Command-line front end. Talks to the library only through its C interface.
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "promptedit/promptedit.h"

#ifndef PROMPTEDIT_DEFAULT_SEED_FILE
#define PROMPTEDIT_DEFAULT_SEED_FILE "data/tasks.json"
#endif

namespace {

using nlohmann::json;

struct CommonFlags {
  std::string config;
  std::optional<std::string> task;
  std::optional<unsigned long long> seed;
  std::optional<std::size_t> k_shots, n_exemplars, pool_size, horizon, iterations;
  std::optional<std::string> scorer, endpoint, data, test_data, seed_file, split;
  bool no_instruction = false, no_exemplar = false, no_verbalizer = false, sample = false;
  std::string out_dir = "runs/latest";
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config, "JSON run config; flags override its values");
  cmd->add_option("--task", f.task, "task name from the seed file, or 'synthetic'");
  cmd->add_option("--seed", f.seed, "run seed");
  cmd->add_option("--k-shots", f.k_shots, "training and dev examples per class");
  cmd->add_option("--n-exemplars", f.n_exemplars, "in-context exemplar slots");
  cmd->add_option("--pool-size", f.pool_size, "exemplar pool size");
  cmd->add_option("--horizon", f.horizon, "edits per episode");
  cmd->add_option("--scorer", f.scorer, "synthetic or remote")
      ->check(CLI::IsMember({"synthetic", "remote"}));
  cmd->add_option("--endpoint", f.endpoint, "remote scorer URL, http://host:port/path");
  cmd->add_option("--data", f.data, "dataset, one {\"text\", \"label\"} object per line");
  cmd->add_option("--test-data", f.test_data, "test dataset in the same format");
  cmd->add_option("--seed-file", f.seed_file, "task seed file");
  cmd->add_option("--iterations", f.iterations, "training iterations");
  cmd->add_option("--split", f.split, "split for evaluate/baseline: train, dev or test")
      ->check(CLI::IsMember({"train", "dev", "test"}));
  cmd->add_flag("--disable-instruction-edits", f.no_instruction, "drop instruction edits");
  cmd->add_flag("--disable-exemplar-edits", f.no_exemplar, "drop exemplar swaps");
  cmd->add_flag("--disable-verbalizer-edits", f.no_verbalizer, "drop verbalizer changes");
  cmd->add_flag("--sample", f.sample, "sample actions at evaluation instead of argmax");
  cmd->add_option("--out-dir", f.out_dir, "directory for metrics, prompts and checkpoints");
}

json build_config(const CommonFlags& f) {
  json doc = json::object();
  if (!f.config.empty()) {
    std::ifstream in(f.config);
    if (!in) throw std::runtime_error("cannot open config file " + f.config);
    doc = json::parse(in);
  }
  auto set = [&](const char* key, const auto& v) {
    if (v) doc[key] = *v;
  };
  set("task", f.task);
  set("seed", f.seed);
  set("k_shots", f.k_shots);
  set("n_exemplars", f.n_exemplars);
  set("pool_size", f.pool_size);
  set("horizon", f.horizon);
  set("scorer", f.scorer);
  set("data", f.data);
  set("test_data", f.test_data);
  set("seed_file", f.seed_file);
  set("split", f.split);
  if (f.endpoint) doc["remote"]["endpoint"] = *f.endpoint;
  if (f.iterations) doc["ppo"]["iterations"] = *f.iterations;
  if (f.no_instruction) doc["families"]["instruction"] = false;
  if (f.no_exemplar) doc["families"]["exemplar"] = false;
  if (f.no_verbalizer) doc["families"]["verbalizer"] = false;
  if (f.sample) doc["sample_at_eval"] = true;
  if (!doc.contains("seed_file") && std::filesystem::exists(PROMPTEDIT_DEFAULT_SEED_FILE))
    doc["seed_file"] = PROMPTEDIT_DEFAULT_SEED_FILE;
  return doc;
}

int report(pe_status st, char* out) {
  if (st != PE_OK) {
    std::cerr << "error [" << pe_status_string(st) << "]: " << pe_last_error() << "\n";
    return static_cast<int>(st);
  }
  std::cout << out << "\n";
  pe_string_free(out);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Query-dependent prompt editing trained with PPO"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(pe_version()));

  CommonFlags train_f, eval_f, base_f, insp_f;
  std::string checkpoint, kind = "no-edit", query, insp_checkpoint;

  auto* train = app.add_subcommand("train", "train an editing policy");
  add_common(train, train_f);

  auto* evaluate = app.add_subcommand("evaluate", "evaluate a checkpoint");
  add_common(evaluate, eval_f);
  evaluate->add_option("--checkpoint", checkpoint, "checkpoint file")->required();

  auto* baseline = app.add_subcommand("baseline", "run a non-learned editing baseline");
  add_common(baseline, base_f);
  baseline->add_option("--kind", kind, "no-edit, random-edit or greedy-edit")
      ->check(CLI::IsMember({"no-edit", "random-edit", "greedy-edit"}));

  auto* inspect = app.add_subcommand("inspect-prompt", "show the prompt for a query");
  add_common(inspect, insp_f);
  inspect->add_option("--query", query, "query text")->required();
  inspect->add_option("--checkpoint", insp_checkpoint, "apply a trained policy's edits");

  CLI11_PARSE(app, argc, argv);

  CommonFlags* flags = train->parsed() ? &train_f : evaluate->parsed() ? &eval_f
                       : baseline->parsed() ? &base_f : &insp_f;
  std::string config_text;
  try {
    config_text = build_config(*flags).dump();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }

  pe_session* session = nullptr;
  if (pe_status st = pe_session_create(config_text.c_str(), &session); st != PE_OK)
    return report(st, nullptr);

  char* out = nullptr;
  pe_status st = PE_OK;
  if (train->parsed()) {
    st = pe_session_train(session, flags->out_dir.c_str(), &out);
  } else if (evaluate->parsed()) {
    st = pe_session_evaluate(session, checkpoint.c_str(), flags->out_dir.c_str(), &out);
  } else if (baseline->parsed()) {
    st = pe_session_baseline(session, kind.c_str(), flags->out_dir.c_str(), &out);
  } else {
    st = pe_session_inspect(session, query.c_str(),
                            insp_checkpoint.empty() ? nullptr : insp_checkpoint.c_str(), &out);
  }
  const int rc = report(st, out);
  pe_session_destroy(session);
  return rc;
}
