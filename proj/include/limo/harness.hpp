#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "limo/model.hpp"
#include "limo/objective.hpp"
#include "limo/tasks.hpp"

namespace limo {

// Training aborted on a non-finite loss; carries where and the last terms.
struct divergence_error : std::runtime_error {
  divergence_error(std::size_t at_step, LossReport last)
      : std::runtime_error("non-finite loss at step " + std::to_string(at_step)),
        step(at_step),
        report(last) {}

  std::size_t step;
  LossReport report;
};

// Adam with cosine learning-rate decay from the peak rate to zero over the
// run. step() consumes and clears the current gradients.
class AdamCosine {
 public:
  AdamCosine(std::vector<Tensor> params, double peak_lr, std::size_t total_steps);

  void step();
  std::size_t steps_taken() const { return t_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  double peak_lr_;
  std::size_t total_steps_;
  std::size_t t_ = 0;
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;
};

struct RunConfig {
  // task source: container path switches to precomputed mode
  std::optional<std::string> embeddings_path;
  GeneratorSpec generator;
  TowerConfig tower;

  std::size_t shots = 1;
  std::size_t query_per_class = 15;
  Strategy strategy = Strategy::lora;
  LossWeights weights;
  double tau = 0.01;
  std::size_t rank = 2;
  double dropout = 0.25;
  std::optional<std::size_t> iterations;  // default 500 * shots
  double learning_rate = 2e-3;
  std::vector<std::uint64_t> seeds = {0, 1, 2};
  bool toggle_ce = true;
  bool toggle_mi = true;
  bool toggle_text = true;
  std::string out_dir;
  std::size_t jobs = 1;

  std::size_t resolved_iterations() const {
    return iterations ? *iterations : 500 * shots;
  }
  void validate() const;
};

struct TraceEntry {
  std::size_t step = 0;
  LossReport report;
};

struct SeedResult {
  std::uint64_t seed = 0;
  double accuracy = 0.0;
  double zero_shot_accuracy = 0.0;
  std::vector<TraceEntry> trace;  // subsampled
};

struct RunResult {
  std::vector<SeedResult> per_seed;
  double mean_accuracy = 0.0;
  double std_accuracy = 0.0;
  std::size_t num_classes = 0;  // effective class count (import can differ from the generator)
  std::string config_json;      // canonical echo of the resolved configuration
  double wall_clock_seconds = 0.0;

  std::string to_json() const;
};

struct TrainOptions {
  LossWeights weights;
  double tau = 0.01;
  std::size_t iterations = 500;
  double learning_rate = 2e-3;
  bool include_ce = true;
};

// Full-batch transductive adaptation of the encoder on one episode: captures
// the zero-shot snapshot, then runs `iterations` optimizer steps over the
// fixed support+query batch. Returns the per-step loss trace; the encoder is
// adapted in place. Query labels are never read here.
std::vector<TraceEntry> train_episode(const Encoder& encoder, const Episode& episode,
                                      const Task& task, const TrainOptions& options,
                                      Rng& dropout_rng);

// Fraction of query samples whose posterior argmax matches the true label.
// Ties go to the lowest class index. Eval mode throughout.
double evaluate(const Encoder& encoder, const Episode& episode, const Task& task);

// One benchmark: per seed, build task + episode + encoder, adapt, evaluate,
// aggregate. Writes result.json, a summary.csv row, and trace.jsonl into
// cfg.out_dir when it is set.
RunResult run_benchmark(const RunConfig& cfg);

enum class SweepParameter { lambda_ent, lambda_cond, lambda_text };

std::string sweep_parameter_name(SweepParameter p);
SweepParameter parse_sweep_parameter(const std::string& name);

struct SweepRow {
  double value = 0.0;
  double mean_accuracy = 0.0;
  double std_accuracy = 0.0;
};

// run_benchmark once per value of the chosen weight; emits sweep.csv under
// cfg.out_dir when it is set.
std::vector<SweepRow> sweep(const RunConfig& cfg, SweepParameter parameter,
                            const std::vector<double>& values);

// Helpers shared by the CLI and the tests.
std::string run_config_to_json(const RunConfig& cfg);
RunConfig run_config_from_json(const std::string& json_text);
std::string summary_csv_header();
std::string summary_csv_row(const RunConfig& cfg, const RunResult& result);

// Encodes a raw task with the encoder in eval mode and packs the result as a
// precomputed-mode task (the dump-synthetic path).
Task encode_task(const Encoder& encoder, const Task& task);

}  // namespace limo
