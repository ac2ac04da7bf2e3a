#include "limo/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <thread>

#include "json.hpp"

namespace limo {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Optimizer

AdamCosine::AdamCosine(std::vector<Tensor> params, double peak_lr, std::size_t total_steps)
    : params_(std::move(params)), peak_lr_(peak_lr), total_steps_(std::max<std::size_t>(total_steps, 1)) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const Tensor& p : params_) {
    m_.emplace_back(p.size(), 0.0);
    v_.emplace_back(p.size(), 0.0);
  }
}

void AdamCosine::step() {
  ++t_;
  const double progress =
      static_cast<double>(t_ - 1) / static_cast<double>(total_steps_);
  const double lr = peak_lr_ * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  const double bias1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
  const double bias2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    std::span<const double> g = params_[i].grad();
    std::span<double> x = params_[i].values_mut();
    std::vector<double>& m = m_[i];
    std::vector<double>& v = v_[i];
    for (std::size_t j = 0; j < x.size(); ++j) {
      m[j] = kBeta1 * m[j] + (1.0 - kBeta1) * g[j];
      v[j] = kBeta2 * v[j] + (1.0 - kBeta2) * g[j] * g[j];
      const double mhat = m[j] / bias1;
      const double vhat = v[j] / bias2;
      x[j] -= lr * mhat / (std::sqrt(vhat) + kEps);
    }
    params_[i].zero_grad();
  }
}

// ---------------------------------------------------------------------------
// Config

void RunConfig::validate() const {
  weights.validate();
  if (seeds.empty()) throw config_error("at least one seed is required");
  if (resolved_iterations() < 1) throw config_error("iterations must be at least 1");
  if (!(tau > 0.0)) throw config_error("tau must be positive");
  if (shots < 1) throw config_error("shots must be at least 1");
  if (query_per_class < 1) throw config_error("query_per_class must be at least 1");
  if (dropout < 0.0 || dropout >= 1.0) throw config_error("dropout must lie in [0, 1)");
  if (jobs < 1) throw config_error("jobs must be at least 1");
  if (embeddings_path && strategy != Strategy::frozen && strategy != Strategy::lvp) {
    throw config_error("precomputed embeddings support only the frozen and lvp strategies, got " +
                       strategy_name(strategy));
  }
  if (!embeddings_path && generator.samples_per_class != 0 &&
      generator.samples_per_class < shots + query_per_class) {
    throw config_error("samples_per_class " + std::to_string(generator.samples_per_class) +
                       " cannot cover " + std::to_string(shots) + " shots + " +
                       std::to_string(query_per_class) + " queries per class");
  }
}

namespace {

LossWeights effective_weights(const RunConfig& cfg) {
  LossWeights w = cfg.weights;
  if (!cfg.toggle_mi) {
    w.lambda_ent = 0.0;
    w.lambda_cond = 0.0;
  }
  if (!cfg.toggle_text) w.lambda_text = 0.0;
  return w;
}

Tensor gather_rows(const Tensor& source, const std::vector<std::size_t>& ids) {
  const std::size_t d = source.cols();
  std::span<const double> src = source.values();
  std::vector<double> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(ids[i] * d), d,
                out.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  return Tensor::from({ids.size(), d}, std::move(out));
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  return h;
}

json report_to_json(const LossReport& r) {
  json j;
  j["ce"] = r.ce;
  j["cond_entropy"] = r.cond_entropy;
  j["marg_entropy"] = r.marg_entropy;
  j["kl_text"] = r.kl_text;
  j["total"] = r.total;
  j["lambda_ent"] = r.weights.lambda_ent;
  j["lambda_cond"] = r.weights.lambda_cond;
  j["lambda_text"] = r.weights.lambda_text;
  j["tau"] = r.tau;
  return j;
}

}  // namespace

std::vector<TraceEntry> train_episode(const Encoder& encoder, const Episode& episode,
                                      const Task& task, const TrainOptions& options,
                                      Rng& dropout_rng) {
  if (episode.query.empty()) throw episode_error("episode has an empty query set");
  for (std::size_t s : episode.support) {
    for (std::size_t q : episode.query) {
      if (s == q) throw episode_error("support and query overlap at index " + std::to_string(s));
    }
  }

  std::vector<std::size_t> order = episode.support;
  order.insert(order.end(), episode.query.begin(), episode.query.end());
  const Tensor batch = gather_rows(task.inputs, order);
  const std::size_t n_support = episode.support.size();

  // Zero-shot anchor: the untouched model's posterior over the query block,
  // captured in eval mode before the first step.
  Posterior anchor;
  {
    TapeSuspend off;
    Rng eval_rng(0);
    Tensor img = encoder.encode_images(batch, false, eval_rng);
    Tensor cls = encoder.encode_classes(task.class_tokens, false, eval_rng);
    Posterior all = posterior(logits(img, cls), encoder.temperature());
    anchor = make_snapshot(
        Posterior{slice_rows(all.probs, n_support, batch.rows()), PosteriorSource::live});
  }

  std::vector<Tensor> params = encoder.trainable_tensors();
  const bool has_params = !params.empty();
  AdamCosine optimizer(std::move(params), options.learning_rate, options.iterations);

  std::vector<TraceEntry> trace;
  trace.reserve(options.iterations);
  for (std::size_t step = 0; step < options.iterations; ++step) {
    Tape tape;
    Tensor img = encoder.encode_images(batch, true, dropout_rng);
    Tensor cls = encoder.encode_classes(task.class_tokens, true, dropout_rng);
    auto [total, report] = limo_loss(img, n_support, cls, episode.support_onehot, anchor,
                                     options.weights, options.tau, options.include_ce);
    if (!std::isfinite(report.total)) throw divergence_error(step, report);
    if (has_params && total.requires_grad()) {
      tape.backward(total);
      optimizer.step();
    }
    trace.push_back({step, report});
  }
  return trace;
}

double evaluate(const Encoder& encoder, const Episode& episode, const Task& task) {
  if (episode.query.empty()) throw episode_error("episode has an empty query set");
  TapeSuspend off;
  Rng eval_rng(0);
  Tensor img = encoder.encode_images(gather_rows(task.inputs, episode.query), false, eval_rng);
  Tensor cls = encoder.encode_classes(task.class_tokens, false, eval_rng);
  Posterior post = posterior(logits(img, cls), encoder.temperature());
  std::span<const double> p = post.probs.values();
  const std::size_t k = post.probs.cols();
  std::size_t hits = 0;
  for (std::size_t i = 0; i < episode.query.size(); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j) {
      if (p[i * k + j] > p[i * k + best]) best = j;  // ties keep the lowest index
    }
    if (best == task.labels[episode.query[i]]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(episode.query.size());
}

// ---------------------------------------------------------------------------
// Benchmark

namespace {

struct SeedUnitInput {
  const RunConfig* cfg;
  const Task* imported;  // shared, read-only; null in generated mode
  std::size_t iterations;
  LossWeights weights;
};

std::unique_ptr<Encoder> build_encoder(const RunConfig& cfg, const Task& task,
                                       std::uint64_t model_seed) {
  if (task.mode == TaskMode::precomputed) {
    return std::make_unique<PrecomputedEncoder>(
        PrecomputedEncoder::build(task.inputs.cols(), cfg.strategy, cfg.tau));
  }
  TowerConfig tower = cfg.tower;
  tower.seed = model_seed;
  ModelOptions options;
  options.rank = cfg.rank;
  options.dropout_p = cfg.dropout;
  options.tau = cfg.tau;
  options.num_classes = task.num_classes;
  return std::make_unique<TwoTowerModel>(TwoTowerModel::build(tower, cfg.strategy, options));
}

SeedResult run_seed_unit(const SeedUnitInput& in, std::uint64_t seed) {
  const RunConfig& cfg = *in.cfg;
  Rng root(seed);

  Task generated;
  const Task* task = in.imported;
  if (!task) {
    GeneratorSpec spec = cfg.generator;
    if (spec.samples_per_class == 0) spec.samples_per_class = cfg.shots + cfg.query_per_class;
    spec.input_dim = cfg.tower.input_dim;
    Rng task_rng = root.derive("task");
    generated = generate_task(spec, task_rng);
    task = &generated;
  }

  Rng split_rng = root.derive("split");
  Episode episode = split_episode(*task, cfg.shots, cfg.query_per_class, split_rng);
  auto encoder = build_encoder(cfg, *task, root.derive("model").state());

  SeedResult result;
  result.seed = seed;
  result.zero_shot_accuracy = evaluate(*encoder, episode, *task);

  TrainOptions options;
  options.weights = in.weights;
  options.tau = cfg.tau;
  options.iterations = in.iterations;
  options.learning_rate = cfg.learning_rate;
  options.include_ce = cfg.toggle_ce;
  Rng dropout_rng = root.derive("dropout");
  std::vector<TraceEntry> full = train_episode(*encoder, episode, *task, options, dropout_rng);

  result.accuracy = evaluate(*encoder, episode, *task);

  const std::size_t stride = std::max<std::size_t>(1, in.iterations / 100);
  for (const TraceEntry& e : full) {
    if (e.step % stride == 0 || e.step + 1 == in.iterations) result.trace.push_back(e);
  }
  return result;
}

void write_outputs(const RunConfig& cfg, const RunResult& result) {
  namespace fs = std::filesystem;
  fs::create_directories(cfg.out_dir);

  std::ofstream rj(fs::path(cfg.out_dir) / "result.json", std::ios::trunc);
  rj << result.to_json() << '\n';

  const fs::path csv_path = fs::path(cfg.out_dir) / "summary.csv";
  const bool fresh = !fs::exists(csv_path);
  std::ofstream csv(csv_path, std::ios::app);
  if (fresh) csv << summary_csv_header() << '\n';
  csv << summary_csv_row(cfg, result) << '\n';

  std::ofstream tj(fs::path(cfg.out_dir) / "trace.jsonl", std::ios::trunc);
  for (const SeedResult& sr : result.per_seed) {
    for (const TraceEntry& e : sr.trace) {
      json j = report_to_json(e.report);
      j["seed"] = sr.seed;
      j["step"] = e.step;
      tj << j.dump() << '\n';
    }
  }
}

}  // namespace

RunResult run_benchmark(const RunConfig& cfg) {
  cfg.validate();
  const auto started = std::chrono::steady_clock::now();

  Task imported;
  const Task* shared = nullptr;
  if (cfg.embeddings_path) {
    imported = import_embeddings(*cfg.embeddings_path);
    shared = &imported;
  }

  SeedUnitInput in{&cfg, shared, cfg.resolved_iterations(), effective_weights(cfg)};

  std::vector<SeedResult> per_seed(cfg.seeds.size());
  std::vector<std::exception_ptr> failures(cfg.seeds.size());
  const std::size_t jobs = std::min<std::size_t>(cfg.jobs, cfg.seeds.size());
  if (jobs <= 1) {
    for (std::size_t i = 0; i < cfg.seeds.size(); ++i) {
      try {
        per_seed[i] = run_seed_unit(in, cfg.seeds[i]);
      } catch (...) {
        failures[i] = std::current_exception();
      }
    }
  } else {
    std::vector<std::thread> pool;
    pool.reserve(jobs);
    for (std::size_t w = 0; w < jobs; ++w) {
      pool.emplace_back([&, w] {
        for (std::size_t i = w; i < cfg.seeds.size(); i += jobs) {
          try {
            per_seed[i] = run_seed_unit(in, cfg.seeds[i]);
          } catch (...) {
            failures[i] = std::current_exception();
          }
        }
      });
    }
    for (std::thread& t : pool) t.join();
  }
  for (std::size_t i = 0; i < failures.size(); ++i) {
    if (failures[i]) {
      try {
        std::rethrow_exception(failures[i]);
      } catch (const std::exception& e) {
        throw std::runtime_error("seed " + std::to_string(cfg.seeds[i]) + " failed: " + e.what());
      }
    }
  }

  RunResult result;
  result.per_seed = std::move(per_seed);
  double sum = 0.0;
  for (const SeedResult& s : result.per_seed) sum += s.accuracy;
  result.mean_accuracy = sum / static_cast<double>(result.per_seed.size());
  double sq = 0.0;
  for (const SeedResult& s : result.per_seed) {
    const double d = s.accuracy - result.mean_accuracy;
    sq += d * d;
  }
  result.std_accuracy = std::sqrt(sq / static_cast<double>(result.per_seed.size()));
  result.num_classes = shared ? shared->num_classes : cfg.generator.num_classes;
  result.config_json = run_config_to_json(cfg);
  result.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();

  if (!cfg.out_dir.empty()) write_outputs(cfg, result);
  return result;
}

// ---------------------------------------------------------------------------
// Sweep

std::string sweep_parameter_name(SweepParameter p) {
  switch (p) {
    case SweepParameter::lambda_ent: return "lambda_ent";
    case SweepParameter::lambda_cond: return "lambda_cond";
    case SweepParameter::lambda_text: return "lambda_text";
  }
  return "?";
}

SweepParameter parse_sweep_parameter(const std::string& name) {
  if (name == "lambda_ent") return SweepParameter::lambda_ent;
  if (name == "lambda_cond") return SweepParameter::lambda_cond;
  if (name == "lambda_text") return SweepParameter::lambda_text;
  throw config_error("unknown sweep parameter '" + name +
                     "' (expected lambda_ent|lambda_cond|lambda_text)");
}

std::vector<SweepRow> sweep(const RunConfig& cfg, SweepParameter parameter,
                            const std::vector<double>& values) {
  if (values.empty()) throw config_error("sweep needs at least one value");
  std::vector<SweepRow> rows;
  rows.reserve(values.size());
  for (double v : values) {
    RunConfig cell = cfg;
    switch (parameter) {
      case SweepParameter::lambda_ent: cell.weights.lambda_ent = v; break;
      case SweepParameter::lambda_cond: cell.weights.lambda_cond = v; break;
      case SweepParameter::lambda_text: cell.weights.lambda_text = v; break;
    }
    if (!cfg.out_dir.empty()) {
      char tag[64];
      std::snprintf(tag, sizeof(tag), "%s_%g", sweep_parameter_name(parameter).c_str(), v);
      cell.out_dir = (std::filesystem::path(cfg.out_dir) / tag).string();
    }
    RunResult r = run_benchmark(cell);
    rows.push_back({v, r.mean_accuracy, r.std_accuracy});
  }
  if (!cfg.out_dir.empty()) {
    std::filesystem::create_directories(cfg.out_dir);
    std::ofstream csv(std::filesystem::path(cfg.out_dir) / "sweep.csv", std::ios::trunc);
    csv << "parameter,value,mean_acc,std_acc\n";
    for (const SweepRow& row : rows) {
      char line[160];
      std::snprintf(line, sizeof(line), "%s,%g,%.6f,%.6f",
                    sweep_parameter_name(parameter).c_str(), row.value, row.mean_accuracy,
                    row.std_accuracy);
      csv << line << '\n';
    }
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Serialization helpers

std::string run_config_to_json(const RunConfig& cfg) {
  json j;
  j["blocks"] = cfg.tower.num_blocks;
  j["classes"] = cfg.generator.num_classes;
  j["class_correlation"] = cfg.generator.class_correlation;
  j["concentration"] = cfg.generator.concentration;
  j["dropout"] = cfg.dropout;
  j["embed_dim"] = cfg.tower.embed_dim;
  j["embeddings"] = cfg.embeddings_path ? json(*cfg.embeddings_path) : json(nullptr);
  j["generator_seed"] = cfg.generator.seed;
  j["hidden_dim"] = cfg.tower.hidden_dim;
  j["input_dim"] = cfg.tower.input_dim;
  j["iterations"] = cfg.resolved_iterations();
  j["jobs"] = cfg.jobs;
  j["lambda_cond"] = cfg.weights.lambda_cond;
  j["lambda_ent"] = cfg.weights.lambda_ent;
  j["lambda_text"] = cfg.weights.lambda_text;
  j["lr"] = cfg.learning_rate;
  j["out"] = cfg.out_dir;
  j["query_per_class"] = cfg.query_per_class;
  j["rank"] = cfg.rank;
  j["samples_per_class"] = cfg.generator.samples_per_class;
  j["seeds"] = cfg.seeds;
  j["shots"] = cfg.shots;
  j["strategy"] = strategy_name(cfg.strategy);
  j["tau"] = cfg.tau;
  json off = json::array();
  if (!cfg.toggle_ce) off.push_back("ce");
  if (!cfg.toggle_mi) off.push_back("mi");
  if (!cfg.toggle_text) off.push_back("text");
  j["toggle_off"] = off;
  return j.dump();
}

RunConfig run_config_from_json(const std::string& json_text) {
  json j = json::parse(json_text);
  RunConfig cfg;
  if (j.contains("blocks")) cfg.tower.num_blocks = j["blocks"].get<std::size_t>();
  if (j.contains("classes")) cfg.generator.num_classes = j["classes"].get<std::size_t>();
  if (j.contains("class_correlation")) {
    cfg.generator.class_correlation = j["class_correlation"].get<double>();
  }
  if (j.contains("concentration")) cfg.generator.concentration = j["concentration"].get<double>();
  if (j.contains("dropout")) cfg.dropout = j["dropout"].get<double>();
  if (j.contains("embed_dim")) cfg.tower.embed_dim = j["embed_dim"].get<std::size_t>();
  if (j.contains("embeddings") && !j["embeddings"].is_null()) {
    cfg.embeddings_path = j["embeddings"].get<std::string>();
  }
  if (j.contains("generator_seed")) cfg.generator.seed = j["generator_seed"].get<std::uint64_t>();
  if (j.contains("hidden_dim")) cfg.tower.hidden_dim = j["hidden_dim"].get<std::size_t>();
  if (j.contains("input_dim")) cfg.tower.input_dim = j["input_dim"].get<std::size_t>();
  if (j.contains("iterations")) cfg.iterations = j["iterations"].get<std::size_t>();
  if (j.contains("jobs")) cfg.jobs = j["jobs"].get<std::size_t>();
  if (j.contains("lambda_cond")) cfg.weights.lambda_cond = j["lambda_cond"].get<double>();
  if (j.contains("lambda_ent")) cfg.weights.lambda_ent = j["lambda_ent"].get<double>();
  if (j.contains("lambda_text")) cfg.weights.lambda_text = j["lambda_text"].get<double>();
  if (j.contains("lr")) cfg.learning_rate = j["lr"].get<double>();
  if (j.contains("out")) cfg.out_dir = j["out"].get<std::string>();
  if (j.contains("query_per_class")) cfg.query_per_class = j["query_per_class"].get<std::size_t>();
  if (j.contains("rank")) cfg.rank = j["rank"].get<std::size_t>();
  if (j.contains("samples_per_class")) {
    cfg.generator.samples_per_class = j["samples_per_class"].get<std::size_t>();
  }
  if (j.contains("seeds")) cfg.seeds = j["seeds"].get<std::vector<std::uint64_t>>();
  if (j.contains("shots")) cfg.shots = j["shots"].get<std::size_t>();
  if (j.contains("strategy")) cfg.strategy = parse_strategy(j["strategy"].get<std::string>());
  if (j.contains("tau")) cfg.tau = j["tau"].get<double>();
  if (j.contains("toggle_off")) {
    for (const auto& t : j["toggle_off"]) {
      const std::string name = t.get<std::string>();
      if (name == "ce") {
        cfg.toggle_ce = false;
      } else if (name == "mi") {
        cfg.toggle_mi = false;
      } else if (name == "text") {
        cfg.toggle_text = false;
      } else {
        throw config_error("unknown toggle '" + name + "' (expected ce|mi|text)");
      }
    }
  }
  return cfg;
}

std::string RunResult::to_json() const {
  json j;
  j["classes"] = num_classes;
  j["config"] = json::parse(config_json);
  j["mean_accuracy"] = mean_accuracy;
  j["std_accuracy"] = std_accuracy;
  json seeds = json::array();
  for (const SeedResult& s : per_seed) {
    json e;
    e["seed"] = s.seed;
    e["accuracy"] = s.accuracy;
    e["zero_shot_accuracy"] = s.zero_shot_accuracy;
    seeds.push_back(std::move(e));
  }
  j["per_seed"] = std::move(seeds);
  json traces = json::array();
  for (const SeedResult& s : per_seed) {
    json t;
    t["seed"] = s.seed;
    json steps = json::array();
    for (const TraceEntry& e : s.trace) {
      json r = report_to_json(e.report);
      r["step"] = e.step;
      steps.push_back(std::move(r));
    }
    t["steps"] = std::move(steps);
    traces.push_back(std::move(t));
  }
  j["trace"] = std::move(traces);
  j["wall_clock_seconds"] = wall_clock_seconds;
  return j.dump(2);
}

std::string summary_csv_header() {
  return "run_id,strategy,shots,K,lambda_ent,lambda_cond,lambda_text,seed_count,mean_acc,std_acc";
}

std::string summary_csv_row(const RunConfig& cfg, const RunResult& result) {
  char row[256];
  std::snprintf(row, sizeof(row), "%016llx,%s,%zu,%zu,%g,%g,%g,%zu,%.6f,%.6f",
                static_cast<unsigned long long>(fnv1a(result.config_json)),
                strategy_name(cfg.strategy).c_str(), cfg.shots, result.num_classes,
                cfg.weights.lambda_ent, cfg.weights.lambda_cond, cfg.weights.lambda_text,
                cfg.seeds.size(), result.mean_accuracy, result.std_accuracy);
  return row;
}

Task encode_task(const Encoder& encoder, const Task& task) {
  TapeSuspend off;
  Rng eval_rng(0);
  Task out;
  out.mode = TaskMode::precomputed;
  out.num_classes = task.num_classes;
  out.labels = task.labels;
  out.inputs = encoder.encode_images(task.inputs, false, eval_rng).detach();
  out.class_tokens = encoder.encode_classes(task.class_tokens, false, eval_rng).detach();
  return out;
}

}  // namespace limo
