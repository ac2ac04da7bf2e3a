#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "limo/tensor.hpp"

namespace limo {

enum class TaskMode { raw, precomputed };

// One classification task. In raw mode `inputs` holds features the towers
// encode and `class_tokens` holds the per-class token vectors; in precomputed
// mode both are unit-norm embeddings and the towers are bypassed.
struct Task {
  TaskMode mode = TaskMode::raw;
  Tensor inputs;                      // [N x dim]
  std::vector<std::uint32_t> labels;  // N entries in [0, num_classes)
  Tensor class_tokens;                // [K x dim]
  std::size_t num_classes = 0;

  std::size_t size() const { return labels.size(); }
};

// Labeled support indices plus their one-hot labels, and unlabeled query
// indices. Query labels never enter an episode; they are read only at
// evaluation time.
struct Episode {
  std::vector<std::size_t> support;
  std::vector<std::size_t> query;
  std::size_t shots = 0;
  Tensor support_onehot;  // [|S| x K]
};

struct GeneratorSpec {
  std::size_t num_classes = 10;
  std::size_t input_dim = 16;
  std::size_t samples_per_class = 29;
  double concentration = 12.0;      // cluster tightness; noise scale is 1/concentration
  double class_correlation = 0.0;   // 0 = independent class means, toward 1 = overlapping
  std::uint64_t seed = 0;
};

// Samples class means on the unit sphere, points as renormalized noisy copies
// of their mean, and class tokens as noisy copies of the means (noise scale
// 0.5/concentration) so a frozen encoder pair gives informative but imperfect
// zero-shot predictions.
Task generate_task(const GeneratorSpec& spec, Rng& rng);
Task generate_task(const GeneratorSpec& spec);

// Uniform per-class sampling without replacement into disjoint support and
// query sets, `shots` and `query_per_class` indices per class respectively.
Episode split_episode(const Task& task, std::size_t shots, std::size_t query_per_class, Rng& rng);

// Raw little-endian payload of the embedding container file:
//   magic "LIMOEMB1" | u32 version=1 | u32 N | u32 d | u32 K
//   N*d f32 image embeddings, row-major | K*d f32 class embeddings | N u32 labels
struct EmbeddingContainer {
  std::uint32_t version = 1;
  std::uint32_t n = 0;
  std::uint32_t dim = 0;
  std::uint32_t num_classes = 0;
  std::vector<float> image_embeddings;
  std::vector<float> class_embeddings;
  std::vector<std::uint32_t> labels;
};

void write_container(const std::string& path, const EmbeddingContainer& c);
EmbeddingContainer read_container(const std::string& path);

// Narrows f64 embeddings to the container layout and writes them.
void write_embeddings(const std::string& path, const Tensor& image_emb, const Tensor& class_emb,
                      const std::vector<std::uint32_t>& labels);

// Loads a container into a precomputed-mode task: widens to f64, validates
// labels, and renormalizes rows whose norm deviates from 1 by at most 1e-3;
// anything worse is rejected.
Task import_embeddings(const std::string& path);

}  // namespace limo
