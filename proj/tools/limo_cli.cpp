// Command-line front end: benchmark runs, weight sweeps, synthetic embedding
// dumps, and container validation.

#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "limo/harness.hpp"

namespace {

std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) seeds.push_back(std::stoull(item));
  }
  return seeds;
}

std::vector<double> parse_double_list(const std::string& text) {
  std::vector<double> values;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) values.push_back(std::stod(item));
  }
  return values;
}

struct CliOptions {
  std::string config_path;
  std::string seeds_text;
  std::string strategy_text;
  std::vector<std::string> toggles_off;
  std::string embeddings;
  std::string out_dir;
  std::size_t iterations = 0;
  limo::RunConfig cfg;
};

// Registers the flags shared by `run` and `sweep`. Values given on the command
// line override the config file; CLI11's count() tells us what was set.
void add_run_flags(CLI::App* cmd, CliOptions& o) {
  cmd->add_option("--config", o.config_path, "JSON config file; flags override its values");
  cmd->add_option("--shots", o.cfg.shots, "labeled samples per class");
  cmd->add_option("--classes", o.cfg.generator.num_classes, "number of classes");
  cmd->add_option("--query-per-class", o.cfg.query_per_class, "query samples per class");
  cmd->add_option("--strategy", o.strategy_text, "lora|lvp|prompt|frozen");
  cmd->add_option("--lambda-ent", o.cfg.weights.lambda_ent, "marginal entropy weight");
  cmd->add_option("--lambda-cond", o.cfg.weights.lambda_cond, "conditional entropy weight");
  cmd->add_option("--lambda-text", o.cfg.weights.lambda_text, "zero-shot KL weight");
  cmd->add_option("--tau", o.cfg.tau, "softmax temperature");
  cmd->add_option("--rank", o.cfg.rank, "adapter rank");
  cmd->add_option("--dropout", o.cfg.dropout, "adapter input dropout rate");
  cmd->add_option("--iterations", o.iterations, "optimizer steps (default 500 * shots)");
  cmd->add_option("--lr", o.cfg.learning_rate, "peak learning rate");
  cmd->add_option("--seeds", o.seeds_text, "comma-separated seed list, e.g. 0,1,2");
  cmd->add_option("--toggle-off", o.toggles_off, "disable a loss term: mi|text|ce")
      ->allow_extra_args(false);
  cmd->add_option("--embeddings", o.embeddings, "embedding container; switches to precomputed mode");
  cmd->add_option("--out", o.out_dir, "output directory for result.json/summary.csv/trace.jsonl");
  cmd->add_option("--input-dim", o.cfg.tower.input_dim, "raw feature width");
  cmd->add_option("--hidden-dim", o.cfg.tower.hidden_dim, "tower hidden width");
  cmd->add_option("--embed-dim", o.cfg.tower.embed_dim, "shared embedding width");
  cmd->add_option("--blocks", o.cfg.tower.num_blocks, "attention blocks per tower");
  cmd->add_option("--samples-per-class", o.cfg.generator.samples_per_class,
                  "generated samples per class (0 = shots + query-per-class)");
  cmd->add_option("--concentration", o.cfg.generator.concentration, "cluster tightness");
  cmd->add_option("--class-correlation", o.cfg.generator.class_correlation,
                  "mean overlap between class centers, in [0,1)");
  cmd->add_option("--jobs", o.cfg.jobs, "seeds trained in parallel");
}

// Folds the config file and explicitly-passed flags into one RunConfig.
limo::RunConfig resolve_config(CLI::App* cmd, CliOptions& o) {
  limo::RunConfig cfg;
  if (!o.config_path.empty()) {
    std::ifstream in(o.config_path);
    if (!in) throw limo::config_error("cannot open config file: " + o.config_path);
    std::stringstream buf;
    buf << in.rdbuf();
    cfg = limo::run_config_from_json(buf.str());
  }
  auto passed = [&](const char* name) { return cmd->count(name) > 0; };
  if (passed("--shots")) cfg.shots = o.cfg.shots;
  if (passed("--classes")) cfg.generator.num_classes = o.cfg.generator.num_classes;
  if (passed("--query-per-class")) cfg.query_per_class = o.cfg.query_per_class;
  if (passed("--strategy")) cfg.strategy = limo::parse_strategy(o.strategy_text);
  if (passed("--lambda-ent")) cfg.weights.lambda_ent = o.cfg.weights.lambda_ent;
  if (passed("--lambda-cond")) cfg.weights.lambda_cond = o.cfg.weights.lambda_cond;
  if (passed("--lambda-text")) cfg.weights.lambda_text = o.cfg.weights.lambda_text;
  if (passed("--tau")) cfg.tau = o.cfg.tau;
  if (passed("--rank")) cfg.rank = o.cfg.rank;
  if (passed("--dropout")) cfg.dropout = o.cfg.dropout;
  if (passed("--iterations")) cfg.iterations = o.iterations;
  if (passed("--lr")) cfg.learning_rate = o.cfg.learning_rate;
  if (passed("--seeds")) cfg.seeds = parse_seed_list(o.seeds_text);
  if (passed("--toggle-off")) {
    for (const std::string& t : o.toggles_off) {
      if (t == "ce") {
        cfg.toggle_ce = false;
      } else if (t == "mi") {
        cfg.toggle_mi = false;
      } else if (t == "text") {
        cfg.toggle_text = false;
      } else {
        throw limo::config_error("unknown toggle '" + t + "' (expected ce|mi|text)");
      }
    }
  }
  if (passed("--embeddings")) cfg.embeddings_path = o.embeddings;
  if (passed("--out")) cfg.out_dir = o.out_dir;
  if (passed("--input-dim")) cfg.tower.input_dim = o.cfg.tower.input_dim;
  if (passed("--hidden-dim")) cfg.tower.hidden_dim = o.cfg.tower.hidden_dim;
  if (passed("--embed-dim")) cfg.tower.embed_dim = o.cfg.tower.embed_dim;
  if (passed("--blocks")) cfg.tower.num_blocks = o.cfg.tower.num_blocks;
  if (passed("--samples-per-class")) {
    cfg.generator.samples_per_class = o.cfg.generator.samples_per_class;
  }
  if (passed("--concentration")) cfg.generator.concentration = o.cfg.generator.concentration;
  if (passed("--class-correlation")) {
    cfg.generator.class_correlation = o.cfg.generator.class_correlation;
  }
  if (passed("--jobs")) cfg.jobs = o.cfg.jobs;
  return cfg;
}

int do_run(CLI::App* cmd, CliOptions& o, const std::string& save_model) {
  limo::RunConfig cfg = resolve_config(cmd, o);
  limo::RunResult result = limo::run_benchmark(cfg);
  std::printf("strategy=%s shots=%zu classes=%zu seeds=%zu\n",
              limo::strategy_name(cfg.strategy).c_str(), cfg.shots, result.num_classes,
              cfg.seeds.size());
  for (const limo::SeedResult& s : result.per_seed) {
    std::printf("  seed %llu: accuracy %.4f (zero-shot %.4f)\n",
                static_cast<unsigned long long>(s.seed), s.accuracy, s.zero_shot_accuracy);
  }
  std::printf("mean accuracy %.4f +- %.4f\n", result.mean_accuracy, result.std_accuracy);
  if (!cfg.out_dir.empty()) std::printf("results written to %s\n", cfg.out_dir.c_str());
  if (!save_model.empty()) {
    // re-train the first seed and persist the adapted model
    limo::Rng root(cfg.seeds.front());
    limo::GeneratorSpec spec = cfg.generator;
    if (spec.samples_per_class == 0) spec.samples_per_class = cfg.shots + cfg.query_per_class;
    spec.input_dim = cfg.tower.input_dim;
    limo::Rng task_rng = root.derive("task");
    limo::Task task = cfg.embeddings_path ? limo::import_embeddings(*cfg.embeddings_path)
                                          : limo::generate_task(spec, task_rng);
    if (task.mode == limo::TaskMode::precomputed) {
      std::fprintf(stderr, "--save-model applies to generated tasks only\n");
      return 1;
    }
    limo::Rng split_rng = root.derive("split");
    limo::Episode ep = limo::split_episode(task, cfg.shots, cfg.query_per_class, split_rng);
    limo::TowerConfig tower = cfg.tower;
    tower.seed = root.derive("model").state();
    limo::ModelOptions options;
    options.rank = cfg.rank;
    options.dropout_p = cfg.dropout;
    options.tau = cfg.tau;
    options.num_classes = task.num_classes;
    limo::TwoTowerModel model = limo::TwoTowerModel::build(tower, cfg.strategy, options);
    limo::TrainOptions train;
    train.weights = cfg.weights;
    if (!cfg.toggle_mi) train.weights.lambda_ent = train.weights.lambda_cond = 0.0;
    if (!cfg.toggle_text) train.weights.lambda_text = 0.0;
    train.tau = cfg.tau;
    train.iterations = cfg.resolved_iterations();
    train.learning_rate = cfg.learning_rate;
    train.include_ce = cfg.toggle_ce;
    limo::Rng dropout_rng = root.derive("dropout");
    limo::train_episode(model, ep, task, train, dropout_rng);
    model.save_checkpoint(save_model);
    std::printf("model checkpoint written to %s\n", save_model.c_str());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale transductive few-shot adaptation engine"};
  app.require_subcommand(1);

  CliOptions run_opts;
  std::string save_model;
  CLI::App* run_cmd = app.add_subcommand("run", "train and evaluate one configuration");
  add_run_flags(run_cmd, run_opts);
  run_cmd->add_option("--save-model", save_model, "write the seed-0 adapted model checkpoint");

  CliOptions sweep_opts;
  std::string sweep_param = "lambda_text";
  std::string sweep_values = "0.1,1,10";
  CLI::App* sweep_cmd = app.add_subcommand("sweep", "run once per value of one loss weight");
  add_run_flags(sweep_cmd, sweep_opts);
  sweep_cmd->add_option("--parameter", sweep_param, "lambda_ent|lambda_cond|lambda_text");
  sweep_cmd->add_option("--values", sweep_values, "comma-separated weight values");

  limo::GeneratorSpec dump_spec;
  dump_spec.samples_per_class = 32;
  limo::TowerConfig dump_tower;
  std::string dump_out = "synthetic.limoemb";
  CLI::App* dump_cmd =
      app.add_subcommand("dump-synthetic", "encode a generated task with a frozen model and "
                                           "write an embedding container");
  dump_cmd->add_option("--classes", dump_spec.num_classes, "number of classes");
  dump_cmd->add_option("--samples-per-class", dump_spec.samples_per_class, "samples per class");
  dump_cmd->add_option("--input-dim", dump_spec.input_dim, "raw feature width");
  dump_cmd->add_option("--concentration", dump_spec.concentration, "cluster tightness");
  dump_cmd->add_option("--class-correlation", dump_spec.class_correlation, "mean overlap");
  dump_cmd->add_option("--seed", dump_spec.seed, "generator seed");
  dump_cmd->add_option("--hidden-dim", dump_tower.hidden_dim, "tower hidden width");
  dump_cmd->add_option("--embed-dim", dump_tower.embed_dim, "embedding width");
  dump_cmd->add_option("--blocks", dump_tower.num_blocks, "attention blocks per tower");
  dump_cmd->add_option("--out", dump_out, "output container path");

  std::string check_path;
  CLI::App* check_cmd = app.add_subcommand("import-check", "validate an embedding container");
  check_cmd->add_option("path", check_path, "container file")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (app.got_subcommand(run_cmd)) return do_run(run_cmd, run_opts, save_model);

    if (app.got_subcommand(sweep_cmd)) {
      limo::RunConfig cfg = resolve_config(sweep_cmd, sweep_opts);
      const auto rows =
          limo::sweep(cfg, limo::parse_sweep_parameter(sweep_param), parse_double_list(sweep_values));
      std::printf("%s sweep:\n", sweep_param.c_str());
      for (const limo::SweepRow& r : rows) {
        std::printf("  %-8g mean %.4f +- %.4f\n", r.value, r.mean_accuracy, r.std_accuracy);
      }
      if (!cfg.out_dir.empty()) std::printf("sweep.csv written to %s\n", cfg.out_dir.c_str());
      return 0;
    }

    if (app.got_subcommand(dump_cmd)) {
      dump_tower.input_dim = dump_spec.input_dim;
      dump_tower.seed = limo::Rng(dump_spec.seed).derive("model").state();
      limo::Task task = limo::generate_task(dump_spec);
      limo::ModelOptions options;
      options.num_classes = task.num_classes;
      limo::TwoTowerModel frozen =
          limo::TwoTowerModel::build(dump_tower, limo::Strategy::frozen, options);
      limo::Task encoded = limo::encode_task(frozen, task);
      limo::write_embeddings(dump_out, encoded.inputs, encoded.class_tokens, encoded.labels);
      std::printf("wrote %zu samples, %zu classes, width %zu to %s\n", encoded.size(),
                  encoded.num_classes, encoded.inputs.cols(), dump_out.c_str());
      return 0;
    }

    if (app.got_subcommand(check_cmd)) {
      limo::Task task = limo::import_embeddings(check_path);
      std::printf("%s: ok (N=%zu, d=%zu, K=%zu)\n", check_path.c_str(), task.size(),
                  task.inputs.cols(), task.num_classes);
      return 0;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
