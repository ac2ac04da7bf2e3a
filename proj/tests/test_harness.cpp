#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "limo/harness.hpp"

using namespace limo;
using nlohmann::json;

namespace {

RunConfig tiny_config() {
  RunConfig cfg;
  cfg.tower.input_dim = 10;
  cfg.tower.hidden_dim = 8;
  cfg.tower.embed_dim = 6;
  cfg.tower.num_blocks = 2;
  cfg.generator.num_classes = 3;
  cfg.generator.concentration = 10.0;
  cfg.shots = 1;
  cfg.query_per_class = 4;
  cfg.iterations = 25;
  cfg.seeds = {0};
  return cfg;
}

Tensor gather(const Tensor& source, const std::vector<std::size_t>& ids) {
  const std::size_t d = source.cols();
  std::vector<double> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = source.at(ids[i], j);
  }
  return Tensor::from({ids.size(), d}, std::move(out));
}

bool params_bit_equal(const std::vector<std::pair<std::string, Tensor>>& a,
                      const std::vector<std::pair<std::string, Tensor>>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].first != b[i].first) return false;
    if (a[i].second.shape() != b[i].second.shape()) return false;
    for (std::size_t j = 0; j < a[i].second.size(); ++j) {
      if (a[i].second.values()[j] != b[i].second.values()[j]) return false;
    }
  }
  return true;
}

std::string strip_wall_clock(const std::string& result_json) {
  json j = json::parse(result_json);
  j.erase("wall_clock_seconds");
  return j.dump();
}

// Precomputed-mode task with hand-picked embeddings for evaluate() checks.
Task handmade_task(std::initializer_list<std::initializer_list<double>> embeddings,
                   std::initializer_list<std::initializer_list<double>> class_emb,
                   std::vector<std::uint32_t> labels) {
  Task t;
  t.mode = TaskMode::precomputed;
  t.inputs = Tensor::row_matrix(embeddings);
  t.class_tokens = Tensor::row_matrix(class_emb);
  t.labels = std::move(labels);
  t.num_classes = t.class_tokens.rows();
  return t;
}

Episode query_only(std::vector<std::size_t> query) {
  Episode ep;
  ep.query = std::move(query);
  return ep;
}

}  // namespace

TEST_CASE("default iteration counts follow the 500 * shots rule") {
  RunConfig cfg;
  cfg.shots = 2;
  CHECK(cfg.resolved_iterations() == 1000);
  cfg.shots = 4;
  CHECK(cfg.resolved_iterations() == 2000);
  cfg.shots = 16;
  CHECK(cfg.resolved_iterations() == 8000);
  cfg.iterations = 37;
  CHECK(cfg.resolved_iterations() == 37);
}

TEST_CASE("config validation rejects bad values and incompatible modes") {
  RunConfig cfg = tiny_config();
  cfg.seeds.clear();
  CHECK_THROWS_AS(cfg.validate(), config_error);

  cfg = tiny_config();
  cfg.embeddings_path = "whatever.limoemb";
  cfg.strategy = Strategy::lora;
  CHECK_THROWS_AS(cfg.validate(), config_error);
  cfg.strategy = Strategy::prompt;
  CHECK_THROWS_AS(cfg.validate(), config_error);
  cfg.strategy = Strategy::lvp;
  CHECK_NOTHROW(cfg.validate());

  cfg = tiny_config();
  cfg.generator.samples_per_class = 3;  // cannot cover 1 shot + 4 queries
  CHECK_THROWS_AS(cfg.validate(), config_error);

  cfg = tiny_config();
  cfg.weights.lambda_ent = -1.0;
  CHECK_THROWS_AS(cfg.validate(), config_error);
}

TEST_CASE("frozen strategy leaves accuracy untouched by training") {
  RunConfig cfg = tiny_config();
  cfg.strategy = Strategy::frozen;
  cfg.iterations = 5;
  RunResult r = run_benchmark(cfg);
  CHECK(r.per_seed[0].accuracy == r.per_seed[0].zero_shot_accuracy);
}

TEST_CASE("ce-only training overfits the labeled shots of a separated task") {
  GeneratorSpec spec;
  spec.num_classes = 2;
  spec.input_dim = 10;
  spec.samples_per_class = 4;
  spec.concentration = 50.0;
  spec.seed = 12;
  Task task = generate_task(spec);
  Rng split_rng(1);
  Episode ep = split_episode(task, 1, 2, split_rng);

  TowerConfig tower;
  tower.input_dim = 10;
  tower.hidden_dim = 8;
  tower.embed_dim = 6;
  tower.num_blocks = 2;
  tower.seed = 5;
  ModelOptions mo;
  mo.rank = 2;
  TwoTowerModel model = TwoTowerModel::build(tower, Strategy::lora, mo);

  TrainOptions opts;
  opts.weights = LossWeights{0.0, 0.0, 0.0};
  opts.iterations = 200;
  opts.learning_rate = 5e-3;
  opts.tau = 0.05;
  Rng drop(3);
  train_episode(model, ep, task, opts, drop);

  Episode support_as_query;
  support_as_query.query = ep.support;
  CHECK(evaluate(model, support_as_query, task) == 1.0);
}

TEST_CASE("weights (0,0,0) reproduce a pure-CE trainer bit for bit") {
  GeneratorSpec spec;
  spec.num_classes = 3;
  spec.input_dim = 10;
  spec.samples_per_class = 6;
  spec.concentration = 8.0;
  spec.seed = 4;
  TowerConfig tower;
  tower.input_dim = 10;
  tower.hidden_dim = 8;
  tower.embed_dim = 6;
  tower.num_blocks = 2;
  tower.seed = 31;
  ModelOptions mo;
  mo.rank = 2;
  const double tau = 0.05;
  const std::size_t iters = 20;
  const double lr = 2e-3;

  Task task = generate_task(spec);
  Rng split_rng(2);
  Episode ep = split_episode(task, 1, 3, split_rng);

  // engine side: full trainer with all weights at zero
  TwoTowerModel engine_model = TwoTowerModel::build(tower, Strategy::lora, mo);
  TrainOptions opts;
  opts.weights = LossWeights{0.0, 0.0, 0.0};
  opts.iterations = iters;
  opts.learning_rate = lr;
  opts.tau = tau;
  Rng engine_drop(7);
  const auto trace = train_episode(engine_model, ep, task, opts, engine_drop);

  // reference side: hand-rolled trainer that only ever builds the CE graph
  TwoTowerModel ce_model = TwoTowerModel::build(tower, Strategy::lora, mo);
  std::vector<std::size_t> order = ep.support;
  order.insert(order.end(), ep.query.begin(), ep.query.end());
  Tensor batch = gather(task.inputs, order);
  AdamCosine opt(ce_model.trainable_tensors(), lr, iters);
  Rng ce_drop(7);
  std::vector<double> ce_totals;
  for (std::size_t step = 0; step < iters; ++step) {
    Tape tape;
    Tensor img = ce_model.encode_images(batch, true, ce_drop);
    Tensor cls = ce_model.encode_classes(task.class_tokens, true, ce_drop);
    Posterior post = posterior(logits(img, cls), tau);
    Posterior support{slice_rows(post.probs, 0, ep.support.size()), PosteriorSource::live};
    Tensor ce = cross_entropy(support, ep.support_onehot);
    tape.backward(ce);
    opt.step();
    ce_totals.push_back(ce.value());
  }

  REQUIRE(trace.size() == iters);
  for (std::size_t step = 0; step < iters; ++step) {
    CHECK(trace[step].report.total == ce_totals[step]);  // bit-equal
  }
  CHECK(params_bit_equal(engine_model.named_tensors(), ce_model.named_tensors()));
}

TEST_CASE("lvp with lambda_text 0 matches a vision-only info-max trainer") {
  GeneratorSpec spec;
  spec.num_classes = 3;
  spec.input_dim = 10;
  spec.samples_per_class = 6;
  spec.concentration = 8.0;
  spec.seed = 9;
  TowerConfig tower;
  tower.input_dim = 10;
  tower.hidden_dim = 8;
  tower.embed_dim = 6;
  tower.num_blocks = 2;
  tower.seed = 13;
  const double tau = 0.05;
  const std::size_t iters = 15;
  const double lr = 2e-3;
  LossWeights w{};
  w.lambda_ent = 10.0;
  w.lambda_cond = 1.0;
  w.lambda_text = 0.0;

  Task task = generate_task(spec);
  Rng split_rng(5);
  Episode ep = split_episode(task, 1, 3, split_rng);

  TwoTowerModel engine_model = TwoTowerModel::build(tower, Strategy::lvp);
  TrainOptions opts;
  opts.weights = w;
  opts.iterations = iters;
  opts.learning_rate = lr;
  opts.tau = tau;
  Rng drop(1);
  const auto trace = train_episode(engine_model, ep, task, opts, drop);

  // oracle: text tower is a fixed linear classifier given by the initial
  // class embeddings; only the vision side trains
  TwoTowerModel tim_model = TwoTowerModel::build(tower, Strategy::lvp);
  Rng eval_rng(0);
  Tensor classifier;
  {
    TapeSuspend off;
    classifier = tim_model.encode_classes(task.class_tokens, false, eval_rng).detach();
  }
  std::vector<std::size_t> order = ep.support;
  order.insert(order.end(), ep.query.begin(), ep.query.end());
  Tensor batch = gather(task.inputs, order);
  AdamCosine opt(tim_model.trainable_tensors(), lr, iters);
  Rng unused(0);
  for (std::size_t step = 0; step < iters; ++step) {
    Tape tape;
    Tensor img = tim_model.encode_images(batch, true, unused);
    Posterior post = posterior(logits(img, classifier), tau);
    Posterior support{slice_rows(post.probs, 0, ep.support.size()), PosteriorSource::live};
    Posterior query{slice_rows(post.probs, ep.support.size(), order.size()),
                    PosteriorSource::live};
    Tensor ce = cross_entropy(support, ep.support_onehot);
    Tensor hc = conditional_entropy(query);
    Tensor hm = marginal_entropy(query);
    Tensor loss = sub(add(ce, scale(hc, w.lambda_cond)), scale(hm, w.lambda_ent));
    tape.backward(loss);
    opt.step();

    CHECK(trace[step].report.kl_text == 0.0);
    CHECK(std::abs(trace[step].report.ce - ce.value()) <= 1e-12);
    CHECK(std::abs(trace[step].report.cond_entropy - hc.value()) <= 1e-12);
    CHECK(std::abs(trace[step].report.marg_entropy - hm.value()) <= 1e-12);
    CHECK(std::abs(trace[step].report.total - loss.value()) <= 1e-12);
  }
}

TEST_CASE("same seed twice gives identical accuracies and identical result json") {
  RunConfig cfg = tiny_config();
  cfg.seeds = {0, 0};
  RunResult twice = run_benchmark(cfg);
  CHECK(twice.per_seed[0].accuracy == twice.per_seed[1].accuracy);
  CHECK(twice.per_seed[0].zero_shot_accuracy == twice.per_seed[1].zero_shot_accuracy);

  cfg.seeds = {0, 1, 2};
  RunResult a = run_benchmark(cfg);
  RunResult b = run_benchmark(cfg);
  CHECK(strip_wall_clock(a.to_json()) == strip_wall_clock(b.to_json()));

  // parallel seed execution produces the same result byte for byte
  RunConfig par = cfg;
  par.jobs = 3;
  RunResult c = run_benchmark(par);
  json ja = json::parse(a.to_json());
  json jc = json::parse(c.to_json());
  ja.erase("wall_clock_seconds");
  jc.erase("wall_clock_seconds");
  ja["config"].erase("jobs");
  jc["config"].erase("jobs");
  CHECK(ja.dump() == jc.dump());
}

TEST_CASE("query labels are consumed only by evaluate") {
  GeneratorSpec spec;
  spec.num_classes = 3;
  spec.input_dim = 10;
  spec.samples_per_class = 6;
  spec.concentration = 8.0;
  spec.seed = 20;
  TowerConfig tower;
  tower.input_dim = 10;
  tower.hidden_dim = 8;
  tower.embed_dim = 6;
  tower.num_blocks = 2;
  tower.seed = 8;
  ModelOptions mo;
  mo.rank = 2;

  Task task = generate_task(spec);
  Rng split_rng(3);
  Episode ep = split_episode(task, 1, 3, split_rng);

  Task scrubbed = task;
  scrubbed.inputs = task.inputs.detach();
  scrubbed.class_tokens = task.class_tokens.detach();
  for (std::size_t q : ep.query) scrubbed.labels[q] = 0;  // forget query labels

  TrainOptions opts;
  opts.iterations = 20;
  opts.tau = 0.05;

  TwoTowerModel m1 = TwoTowerModel::build(tower, Strategy::lora, mo);
  Rng d1(9);
  const auto t1 = train_episode(m1, ep, task, opts, d1);

  TwoTowerModel m2 = TwoTowerModel::build(tower, Strategy::lora, mo);
  Rng d2(9);
  const auto t2 = train_episode(m2, ep, scrubbed, opts, d2);

  REQUIRE(t1.size() == t2.size());
  for (std::size_t i = 0; i < t1.size(); ++i) {
    CHECK(t1[i].report.total == t2[i].report.total);
  }
  CHECK(params_bit_equal(m1.named_tensors(), m2.named_tensors()));
  CHECK(evaluate(m1, ep, task) == evaluate(m2, ep, task));
}

TEST_CASE("strategy containment: frozen tensors never move") {
  GeneratorSpec spec;
  spec.num_classes = 3;
  spec.input_dim = 10;
  spec.samples_per_class = 5;
  spec.concentration = 8.0;
  spec.seed = 2;
  Task task = generate_task(spec);
  Rng split_rng(4);
  Episode ep = split_episode(task, 1, 2, split_rng);

  for (Strategy s : {Strategy::lora, Strategy::lvp, Strategy::prompt, Strategy::frozen}) {
    TowerConfig tower;
    tower.input_dim = 10;
    tower.hidden_dim = 8;
    tower.embed_dim = 6;
    tower.num_blocks = 2;
    tower.seed = 44;
    ModelOptions mo;
    mo.rank = 2;
    mo.num_classes = 3;
    TwoTowerModel model = TwoTowerModel::build(tower, s, mo);

    std::vector<std::pair<std::string, Tensor>> before;
    for (const auto& [name, t] : model.named_tensors()) before.emplace_back(name, t.detach());

    TrainOptions opts;
    opts.iterations = 15;
    opts.tau = 0.05;
    Rng drop(6);
    train_episode(model, ep, task, opts, drop);

    std::size_t moved = 0;
    for (std::size_t i = 0; i < before.size(); ++i) {
      const auto& [name, now] = model.named_tensors()[i];
      bool same = true;
      for (std::size_t j = 0; j < now.size(); ++j) {
        same = same && now.values()[j] == before[i].second.values()[j];
      }
      if (!now.requires_grad()) {
        CHECK(same);  // frozen tensors bit-identical to their initial value
      } else if (!same) {
        ++moved;
      }
    }
    if (s != Strategy::frozen) CHECK(moved > 0);
  }
}

TEST_CASE("evaluate: perfect, inverted, and tied posteriors") {
  Task aligned = handmade_task({{1, 0}, {0, 1}, {1, 0}}, {{1, 0}, {0, 1}}, {0, 1, 0});
  CHECK(evaluate(PrecomputedEncoder::build(2, Strategy::frozen, 0.05), query_only({0, 1, 2}),
                 aligned) == 1.0);

  Task inverted = handmade_task({{1, 0}, {0, 1}}, {{1, 0}, {0, 1}}, {1, 0});
  CHECK(evaluate(PrecomputedEncoder::build(2, Strategy::frozen, 0.05), query_only({0, 1}),
                 inverted) == 0.0);

  // exact ties resolve to the lowest class index
  const double r = std::sqrt(0.5);
  Task tied = handmade_task({{r, r}, {r, r}}, {{1, 0}, {0, 1}}, {0, 1});
  CHECK(evaluate(PrecomputedEncoder::build(2, Strategy::frozen, 0.05), query_only({0, 1}),
                 tied) == 0.5);
}

TEST_CASE("run_benchmark writes result.json, summary.csv, trace.jsonl") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::path("harness_out");
  fs::remove_all(dir);

  RunConfig cfg = tiny_config();
  cfg.out_dir = dir.string();
  RunResult full = run_benchmark(cfg);

  RunConfig ablation = cfg;
  ablation.weights = LossWeights{0.0, 0.0, 0.0};
  run_benchmark(ablation);

  std::ifstream csv(dir / "summary.csv");
  std::string line;
  std::getline(csv, line);
  CHECK(line ==
        "run_id,strategy,shots,K,lambda_ent,lambda_cond,lambda_text,seed_count,mean_acc,std_acc");
  std::vector<std::string> rows;
  while (std::getline(csv, line)) rows.push_back(line);
  REQUIRE(rows.size() == 2);  // full vs ablation, Table-style comparison
  CHECK(rows[0].find("lora,1,3,10,1,0.1") != std::string::npos);
  CHECK(rows[1].find("lora,1,3,0,0,0") != std::string::npos);

  std::ifstream rj(dir / "result.json");
  json parsed = json::parse(rj);
  CHECK(parsed["mean_accuracy"].is_number());
  CHECK(parsed["config"]["iterations"] == 25);
  CHECK(parsed["per_seed"].size() == 1);

  std::ifstream tj(dir / "trace.jsonl");
  std::size_t count = 0;
  while (std::getline(tj, line)) {
    json rec = json::parse(line);
    CHECK(rec.contains("step"));
    CHECK(rec.contains("total"));
    ++count;
  }
  CHECK(count == full.per_seed[0].trace.size());

  // mean and std recompose from the per-seed accuracies
  double mean = 0.0;
  for (const SeedResult& s : full.per_seed) mean += s.accuracy;
  mean /= static_cast<double>(full.per_seed.size());
  CHECK(std::abs(mean - full.mean_accuracy) <= 1e-12);
  fs::remove_all(dir);
}

TEST_CASE("sweep emits one row per value and matches run_benchmark on singletons") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::path("sweep_out");
  fs::remove_all(dir);

  RunConfig cfg = tiny_config();
  cfg.iterations = 8;
  cfg.out_dir = dir.string();
  const auto rows = sweep(cfg, SweepParameter::lambda_text, {0.1, 1.0, 10.0});
  REQUIRE(rows.size() == 3);
  CHECK(rows[0].value == 0.1);
  CHECK(rows[2].value == 10.0);

  std::ifstream csv(dir / "sweep.csv");
  std::string line;
  std::getline(csv, line);
  CHECK(line == "parameter,value,mean_acc,std_acc");
  std::size_t data_rows = 0;
  while (std::getline(csv, line)) ++data_rows;
  CHECK(data_rows == 3);

  RunConfig solo = cfg;
  solo.out_dir.clear();
  const auto one = sweep(solo, SweepParameter::lambda_ent, {10.0});
  RunResult direct = run_benchmark(solo);
  REQUIRE(one.size() == 1);
  CHECK(one[0].mean_accuracy == direct.mean_accuracy);
  CHECK(one[0].std_accuracy == direct.std_accuracy);

  CHECK_THROWS_AS(sweep(solo, SweepParameter::lambda_ent, {}), config_error);
  fs::remove_all(dir);
}

TEST_CASE("training aborts with context on a non-finite loss") {
  GeneratorSpec spec;
  spec.num_classes = 2;
  spec.input_dim = 10;
  spec.samples_per_class = 4;
  spec.seed = 30;
  Task task = generate_task(spec);
  Rng split_rng(2);
  Episode ep = split_episode(task, 1, 2, split_rng);

  TowerConfig tower;
  tower.input_dim = 10;
  tower.hidden_dim = 8;
  tower.embed_dim = 6;
  tower.seed = 3;
  ModelOptions mo;
  mo.rank = 2;
  TwoTowerModel model = TwoTowerModel::build(tower, Strategy::lora, mo);
  // adapters()[2] targets the first vision value matrix, which every forward hits
  REQUIRE(model.adapters()[2].target == "vision.b0.wv");
  Tensor poisoned = model.adapters()[2].B;
  poisoned.values_mut()[0] = std::nan("");

  TrainOptions opts;
  opts.iterations = 5;
  Rng drop(0);
  try {
    train_episode(model, ep, task, opts, drop);
    FAIL("expected divergence_error");
  } catch (const divergence_error& e) {
    CHECK(e.step == 0);
    CHECK_FALSE(std::isfinite(e.report.total));
  }

  Episode overlapping = ep;
  overlapping.query.push_back(ep.support.front());
  TwoTowerModel fresh = TwoTowerModel::build(tower, Strategy::lora, mo);
  CHECK_THROWS_AS(train_episode(fresh, overlapping, task, opts, drop), episode_error);
}

TEST_CASE("config json roundtrip preserves every field") {
  RunConfig cfg = tiny_config();
  cfg.strategy = Strategy::lvp;
  cfg.weights.lambda_text = 0.7;
  cfg.toggle_text = false;
  cfg.seeds = {3, 4, 5};
  cfg.out_dir = "somewhere";
  RunConfig back = run_config_from_json(run_config_to_json(cfg));
  CHECK(run_config_to_json(back) == run_config_to_json(cfg));
  CHECK(back.strategy == Strategy::lvp);
  CHECK(back.seeds == cfg.seeds);
  CHECK_FALSE(back.toggle_text);
  CHECK(back.weights.lambda_text == 0.7);
}
