#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <vector>

#include "limo/tasks.hpp"

using namespace limo;

namespace {

bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a.values()[i] != b.values()[i]) return false;
  }
  return true;
}

std::vector<char> slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

std::vector<double> class_mean(const Task& task, std::uint32_t c) {
  const std::size_t d = task.inputs.cols();
  std::vector<double> mean(d, 0.0);
  std::size_t count = 0;
  for (std::size_t i = 0; i < task.size(); ++i) {
    if (task.labels[i] != c) continue;
    for (std::size_t j = 0; j < d; ++j) mean[j] += task.inputs.at(i, j);
    ++count;
  }
  for (double& v : mean) v /= static_cast<double>(count);
  return mean;
}

EmbeddingContainer tiny_container() {
  EmbeddingContainer c;
  c.n = 3;
  c.dim = 2;
  c.num_classes = 2;
  c.image_embeddings = {1.0f, 0.0f, 0.0f, 1.0f, 0.6f, 0.8f};
  c.class_embeddings = {1.0f, 0.0f, 0.0f, 1.0f};
  c.labels = {0, 1, 1};
  return c;
}

}  // namespace

TEST_CASE("generate_task: determinism, unit rows, class coverage") {
  GeneratorSpec spec;
  spec.num_classes = 4;
  spec.input_dim = 12;
  spec.samples_per_class = 9;
  spec.concentration = 6.0;
  spec.seed = 17;

  Task a = generate_task(spec);
  Task b = generate_task(spec);
  CHECK(bit_equal(a.inputs, b.inputs));
  CHECK(bit_equal(a.class_tokens, b.class_tokens));
  CHECK(a.labels == b.labels);

  CHECK(a.size() == 36);
  CHECK(a.num_classes == 4);
  for (std::size_t i = 0; i < a.size(); ++i) {
    double sq = 0.0;
    for (std::size_t j = 0; j < 12; ++j) sq += a.inputs.at(i, j) * a.inputs.at(i, j);
    CHECK(std::abs(std::sqrt(sq) - 1.0) <= 1e-12);
  }
  std::set<std::uint32_t> seen(a.labels.begin(), a.labels.end());
  CHECK(seen.size() == 4);

  GeneratorSpec bad = spec;
  bad.concentration = 0.0;
  CHECK_THROWS_AS(generate_task(bad), config_error);
  bad = spec;
  bad.class_correlation = 1.0;
  CHECK_THROWS_AS(generate_task(bad), config_error);
  bad = spec;
  bad.num_classes = 1;
  CHECK_THROWS_AS(generate_task(bad), config_error);
}

TEST_CASE("highly concentrated clusters separate perfectly under nearest mean") {
  GeneratorSpec spec;
  spec.num_classes = 3;
  spec.input_dim = 16;
  spec.samples_per_class = 20;
  spec.concentration = 200.0;
  spec.seed = 5;
  Task task = generate_task(spec);

  std::vector<std::vector<double>> means;
  for (std::uint32_t c = 0; c < 3; ++c) means.push_back(class_mean(task, c));
  for (std::size_t i = 0; i < task.size(); ++i) {
    std::size_t best = 0;
    double best_dot = -2.0;
    for (std::size_t c = 0; c < 3; ++c) {
      double dot = 0.0;
      for (std::size_t j = 0; j < 16; ++j) dot += task.inputs.at(i, j) * means[c][j];
      if (dot > best_dot) {
        best_dot = dot;
        best = c;
      }
    }
    CHECK(best == task.labels[i]);
  }
}

TEST_CASE("nearest-mean label fidelity at concentration 10 over 2000+ points") {
  GeneratorSpec spec;
  spec.num_classes = 5;
  spec.input_dim = 16;
  spec.samples_per_class = 500;
  spec.concentration = 10.0;
  spec.seed = 21;
  Task task = generate_task(spec);
  REQUIRE(task.size() >= 2000);

  std::vector<std::vector<double>> means;
  for (std::uint32_t c = 0; c < 5; ++c) means.push_back(class_mean(task, c));
  std::size_t hits = 0;
  for (std::size_t i = 0; i < task.size(); ++i) {
    std::size_t best = 0;
    double best_dot = -2.0;
    for (std::size_t c = 0; c < 5; ++c) {
      double dot = 0.0;
      for (std::size_t j = 0; j < 16; ++j) dot += task.inputs.at(i, j) * means[c][j];
      if (dot > best_dot) {
        best_dot = dot;
        best = c;
      }
    }
    hits += best == task.labels[i];
  }
  CHECK(static_cast<double>(hits) / static_cast<double>(task.size()) >= 0.95);
}

TEST_CASE("uncorrelated class means are near-orthogonal in high dimension") {
  // Monte Carlo over 1000 seed pairs: |dot| <= 0.2 should fail only with
  // probability well under 1e-2 per draw at input_dim = 256
  GeneratorSpec spec;
  spec.num_classes = 2;
  spec.input_dim = 256;
  spec.samples_per_class = 1;
  spec.concentration = 1e6;  // points sit on the means
  spec.class_correlation = 0.0;
  std::size_t violations = 0;
  for (std::uint64_t s = 0; s < 1000; ++s) {
    spec.seed = s;
    Task t = generate_task(spec);
    double dot = 0.0;
    for (std::size_t j = 0; j < 256; ++j) dot += t.inputs.at(0, j) * t.inputs.at(1, j);
    if (std::abs(dot) > 0.2) ++violations;
  }
  CHECK(violations <= 10);
}

TEST_CASE("split_episode: exact per-class counts, disjoint, deterministic") {
  GeneratorSpec spec;
  spec.num_classes = 10;
  spec.input_dim = 8;
  spec.samples_per_class = 30;
  spec.seed = 3;
  Task task = generate_task(spec);

  Rng r1(7), r2(7);
  Episode a = split_episode(task, 4, 25, r1);
  Episode b = split_episode(task, 4, 25, r2);
  CHECK(a.support == b.support);
  CHECK(a.query == b.query);

  CHECK(a.support.size() == 40);  // 4-shot, 10 classes
  CHECK(a.query.size() == 250);
  CHECK(a.shots == 4);

  std::vector<std::size_t> support_counts(10, 0);
  for (std::size_t i : a.support) support_counts[task.labels[i]]++;
  for (std::size_t c = 0; c < 10; ++c) CHECK(support_counts[c] == 4);

  std::set<std::size_t> s(a.support.begin(), a.support.end());
  std::set<std::size_t> q(a.query.begin(), a.query.end());
  CHECK(s.size() == a.support.size());
  CHECK(q.size() == a.query.size());
  for (std::size_t i : a.query) CHECK(s.count(i) == 0);

  // one-hot labels line up with the support indices
  for (std::size_t i = 0; i < a.support.size(); ++i) {
    for (std::size_t c = 0; c < 10; ++c) {
      CHECK(a.support_onehot.at(i, c) == (task.labels[a.support[i]] == c ? 1.0 : 0.0));
    }
  }

  Rng r3(9);
  Episode minimal = split_episode(task, 1, 1, r3);
  CHECK(minimal.support.size() == 10);
  CHECK(minimal.query.size() == 10);

  Rng r4(1);
  CHECK_THROWS_AS(split_episode(task, 20, 25, r4), episode_error);
}

TEST_CASE("episode legality holds across many generated episodes") {
  Rng meta(99);
  for (int round = 0; round < 25; ++round) {
    GeneratorSpec spec;
    spec.num_classes = 2 + meta.next_u64() % 6;
    spec.input_dim = 6;
    spec.samples_per_class = 6 + meta.next_u64() % 10;
    spec.seed = 100 + static_cast<std::uint64_t>(round);
    Task task = generate_task(spec);

    const std::size_t shots = 1 + meta.next_u64() % 3;
    const std::size_t max_q = spec.samples_per_class - shots;
    const std::size_t qpc = 1 + meta.next_u64() % max_q;
    Rng split_rng(meta.next_u64());
    Episode ep = split_episode(task, shots, qpc, split_rng);

    std::vector<std::size_t> s_count(spec.num_classes, 0), q_count(spec.num_classes, 0);
    for (std::size_t i : ep.support) s_count[task.labels[i]]++;
    for (std::size_t i : ep.query) q_count[task.labels[i]]++;
    std::set<std::size_t> support_set(ep.support.begin(), ep.support.end());
    for (std::size_t c = 0; c < spec.num_classes; ++c) {
      CHECK(s_count[c] == shots);
      CHECK(q_count[c] == qpc);
    }
    for (std::size_t i : ep.query) CHECK(support_set.count(i) == 0);
    CHECK(ep.shots == shots);
  }
}

TEST_CASE("container write-read roundtrip is bit-exact and file-stable") {
  const std::string p1 = "roundtrip_a.limoemb";
  const std::string p2 = "roundtrip_b.limoemb";
  EmbeddingContainer c = tiny_container();
  write_container(p1, c);
  EmbeddingContainer back = read_container(p1);
  CHECK(back.n == c.n);
  CHECK(back.dim == c.dim);
  CHECK(back.num_classes == c.num_classes);
  CHECK(back.image_embeddings == c.image_embeddings);
  CHECK(back.class_embeddings == c.class_embeddings);
  CHECK(back.labels == c.labels);

  write_container(p2, back);
  CHECK(slurp(p1) == slurp(p2));
}

TEST_CASE("import rejects truncation, bad magic, bad labels, bad norms") {
  const std::string path = "import_check.limoemb";
  write_container(path, tiny_container());

  Task ok = import_embeddings(path);
  CHECK(ok.mode == TaskMode::precomputed);
  CHECK(ok.size() == 3);
  CHECK(ok.num_classes == 2);
  for (std::size_t i = 0; i < ok.size(); ++i) {
    double sq = 0.0;
    for (std::size_t j = 0; j < 2; ++j) sq += ok.inputs.at(i, j) * ok.inputs.at(i, j);
    CHECK(std::abs(std::sqrt(sq) - 1.0) <= 1e-12);
  }

  // truncation at every prefix length fails without producing a task
  const std::vector<char> bytes = slurp(path);
  for (std::size_t keep : {0UL, 4UL, 11UL, 20UL, bytes.size() - 1}) {
    const std::string cut = "truncated.limoemb";
    std::ofstream os(cut, std::ios::binary | std::ios::trunc);
    os.write(bytes.data(), static_cast<std::streamsize>(keep));
    os.close();
    CHECK_THROWS_AS(import_embeddings(cut), format_error);
  }

  {
    std::vector<char> mangled = bytes;
    mangled[0] = 'X';
    std::ofstream os("badmagic.limoemb", std::ios::binary | std::ios::trunc);
    os.write(mangled.data(), static_cast<std::streamsize>(mangled.size()));
    os.close();
    CHECK_THROWS_AS(import_embeddings("badmagic.limoemb"), format_error);
  }
  {
    std::vector<char> extra = bytes;
    extra.push_back('\0');
    std::ofstream os("trailing.limoemb", std::ios::binary | std::ios::trunc);
    os.write(extra.data(), static_cast<std::streamsize>(extra.size()));
    os.close();
    CHECK_THROWS_AS(import_embeddings("trailing.limoemb"), format_error);
  }

  EmbeddingContainer bad_label = tiny_container();
  bad_label.labels[2] = 2;  // == K
  write_container("badlabel.limoemb", bad_label);
  CHECK_THROWS_AS(import_embeddings("badlabel.limoemb"), label_error);

  EmbeddingContainer empty_class = tiny_container();
  empty_class.labels = {0, 0, 0};  // class 1 unused
  write_container("emptyclass.limoemb", empty_class);
  CHECK_THROWS_AS(import_embeddings("emptyclass.limoemb"), label_error);

  EmbeddingContainer bad_norm = tiny_container();
  bad_norm.image_embeddings[0] = 1.01f;  // norm off by ~1e-2 > 1e-3
  write_container("badnorm.limoemb", bad_norm);
  try {
    import_embeddings("badnorm.limoemb");
    FAIL("expected format_error");
  } catch (const format_error& e) {
    CHECK(e.byte_offset == 24);  // first image row starts right after the header
  }

  // slightly off-unit rows are renormalized rather than rejected
  EmbeddingContainer near = tiny_container();
  near.image_embeddings[4] = 0.6004f;
  write_container("nearunit.limoemb", near);
  Task renorm = import_embeddings("nearunit.limoemb");
  double sq = 0.0;
  for (std::size_t j = 0; j < 2; ++j) sq += renorm.inputs.at(2, j) * renorm.inputs.at(2, j);
  CHECK(std::abs(std::sqrt(sq) - 1.0) <= 1e-12);
}
