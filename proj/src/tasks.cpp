#include "limo/tasks.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

namespace limo {

static_assert(std::endian::native == std::endian::little,
              "embedding container io assumes a little-endian host");

namespace {

void normalize_in_place(std::vector<double>& v, std::size_t dim, std::size_t row) {
  double sq = 0.0;
  for (std::size_t j = 0; j < dim; ++j) sq += v[row * dim + j] * v[row * dim + j];
  const double inv = 1.0 / std::sqrt(sq);
  for (std::size_t j = 0; j < dim; ++j) v[row * dim + j] *= inv;
}

std::vector<double> unit_vector(std::size_t dim, Rng& rng) {
  std::vector<double> v(dim);
  for (double& x : v) x = rng.next_gaussian();
  normalize_in_place(v, dim, 0);
  return v;
}

}  // namespace

Task generate_task(const GeneratorSpec& spec, Rng& rng) {
  if (spec.num_classes < 2) {
    throw config_error("generator needs at least 2 classes, got " +
                       std::to_string(spec.num_classes));
  }
  if (spec.input_dim < 1 || spec.samples_per_class < 1) {
    throw config_error("generator dimensions and samples per class must be at least 1");
  }
  if (!(spec.concentration > 0.0)) {
    throw config_error("generator concentration must be positive");
  }
  if (spec.class_correlation < 0.0 || spec.class_correlation >= 1.0) {
    throw config_error("class_correlation must lie in [0, 1)");
  }

  const std::size_t k = spec.num_classes;
  const std::size_t d = spec.input_dim;
  const std::size_t spc = spec.samples_per_class;
  const double noise = 1.0 / spec.concentration;
  const double token_noise = 0.5 / spec.concentration;

  // class means: a shared direction blended with independent ones
  std::vector<double> shared = unit_vector(d, rng);
  std::vector<std::vector<double>> means(k);
  for (std::size_t c = 0; c < k; ++c) {
    std::vector<double> own = unit_vector(d, rng);
    std::vector<double> m(d);
    for (std::size_t j = 0; j < d; ++j) {
      m[j] = spec.class_correlation * shared[j] + (1.0 - spec.class_correlation) * own[j];
    }
    normalize_in_place(m, d, 0);
    means[c] = std::move(m);
  }

  Task task;
  task.mode = TaskMode::raw;
  task.num_classes = k;
  std::vector<double> points(k * spc * d);
  task.labels.resize(k * spc);
  for (std::size_t c = 0; c < k; ++c) {
    for (std::size_t s = 0; s < spc; ++s) {
      const std::size_t row = c * spc + s;
      for (std::size_t j = 0; j < d; ++j) {
        points[row * d + j] = means[c][j] + rng.next_gaussian(noise);
      }
      normalize_in_place(points, d, row);
      task.labels[row] = static_cast<std::uint32_t>(c);
    }
  }
  task.inputs = Tensor::from({k * spc, d}, std::move(points));

  std::vector<double> tokens(k * d);
  for (std::size_t c = 0; c < k; ++c) {
    for (std::size_t j = 0; j < d; ++j) {
      tokens[c * d + j] = means[c][j] + rng.next_gaussian(token_noise);
    }
  }
  task.class_tokens = Tensor::from({k, d}, std::move(tokens));
  return task;
}

Task generate_task(const GeneratorSpec& spec) {
  Rng rng = Rng(spec.seed).derive("task");
  return generate_task(spec, rng);
}

Episode split_episode(const Task& task, std::size_t shots, std::size_t query_per_class,
                      Rng& rng) {
  if (shots < 1 || query_per_class < 1) {
    throw episode_error("shots and query_per_class must be at least 1");
  }
  const std::size_t k = task.num_classes;
  std::vector<std::vector<std::size_t>> per_class(k);
  for (std::size_t i = 0; i < task.labels.size(); ++i) {
    const std::uint32_t c = task.labels[i];
    if (c >= k) throw label_error("task label " + std::to_string(c) + " out of range");
    per_class[c].push_back(i);
  }

  Episode ep;
  ep.shots = shots;
  const std::size_t need = shots + query_per_class;
  for (std::size_t c = 0; c < k; ++c) {
    auto& pool = per_class[c];
    if (pool.size() < need) {
      throw episode_error("class " + std::to_string(c) + " has " + std::to_string(pool.size()) +
                          " samples but the episode needs " + std::to_string(need));
    }
    // partial Fisher-Yates: the first `need` slots are a uniform draw
    for (std::size_t i = 0; i < need; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(rng.next_u64() % (pool.size() - i));
      std::swap(pool[i], pool[j]);
    }
    ep.support.insert(ep.support.end(), pool.begin(),
                      pool.begin() + static_cast<std::ptrdiff_t>(shots));
    ep.query.insert(ep.query.end(), pool.begin() + static_cast<std::ptrdiff_t>(shots),
                    pool.begin() + static_cast<std::ptrdiff_t>(need));
  }

  std::vector<double> onehot(ep.support.size() * k, 0.0);
  for (std::size_t i = 0; i < ep.support.size(); ++i) {
    onehot[i * k + task.labels[ep.support[i]]] = 1.0;
  }
  ep.support_onehot = Tensor::from({ep.support.size(), k}, std::move(onehot));
  return ep;
}

// ---------------------------------------------------------------------------
// Embedding container io

namespace {

constexpr char kMagic[8] = {'L', 'I', 'M', 'O', 'E', 'M', 'B', '1'};

void write_u32(std::ofstream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

std::uint32_t read_u32(std::ifstream& is, std::size_t& offset, const char* field) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!is) throw format_error(std::string("container truncated while reading ") + field, offset);
  offset += sizeof(v);
  return v;
}

}  // namespace

void write_container(const std::string& path, const EmbeddingContainer& c) {
  if (c.image_embeddings.size() != static_cast<std::size_t>(c.n) * c.dim ||
      c.class_embeddings.size() != static_cast<std::size_t>(c.num_classes) * c.dim ||
      c.labels.size() != c.n) {
    throw format_error("container payload sizes do not match its header", 0);
  }
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw format_error("cannot open container for writing: " + path, 0);
  os.write(kMagic, sizeof(kMagic));
  write_u32(os, c.version);
  write_u32(os, c.n);
  write_u32(os, c.dim);
  write_u32(os, c.num_classes);
  os.write(reinterpret_cast<const char*>(c.image_embeddings.data()),
           static_cast<std::streamsize>(c.image_embeddings.size() * sizeof(float)));
  os.write(reinterpret_cast<const char*>(c.class_embeddings.data()),
           static_cast<std::streamsize>(c.class_embeddings.size() * sizeof(float)));
  os.write(reinterpret_cast<const char*>(c.labels.data()),
           static_cast<std::streamsize>(c.labels.size() * sizeof(std::uint32_t)));
  if (!os) throw format_error("short write: " + path, 0);
}

EmbeddingContainer read_container(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw format_error("cannot open container: " + path, 0);
  std::size_t offset = 0;
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(magic)) != 0) {
    throw format_error("bad container magic", 0);
  }
  offset += sizeof(magic);

  EmbeddingContainer c;
  c.version = read_u32(is, offset, "version");
  if (c.version != 1) throw format_error("unsupported container version", offset - 4);
  c.n = read_u32(is, offset, "sample count");
  c.dim = read_u32(is, offset, "embedding width");
  c.num_classes = read_u32(is, offset, "class count");
  if (c.n < 1 || c.dim < 1) throw format_error("container declares an empty payload", offset - 8);
  if (c.num_classes < 2) throw format_error("container declares fewer than 2 classes", offset - 4);

  auto read_block = [&](void* dst, std::size_t bytes, const char* field) {
    is.read(static_cast<char*>(dst), static_cast<std::streamsize>(bytes));
    if (!is || static_cast<std::size_t>(is.gcount()) != bytes) {
      throw format_error(std::string("container truncated while reading ") + field,
                         offset + static_cast<std::size_t>(std::max<std::streamsize>(is.gcount(), 0)));
    }
    offset += bytes;
  };
  c.image_embeddings.resize(static_cast<std::size_t>(c.n) * c.dim);
  read_block(c.image_embeddings.data(), c.image_embeddings.size() * sizeof(float),
             "image embeddings");
  c.class_embeddings.resize(static_cast<std::size_t>(c.num_classes) * c.dim);
  read_block(c.class_embeddings.data(), c.class_embeddings.size() * sizeof(float),
             "class embeddings");
  c.labels.resize(c.n);
  read_block(c.labels.data(), c.labels.size() * sizeof(std::uint32_t), "labels");

  if (is.peek() != std::ifstream::traits_type::eof()) {
    throw format_error("trailing bytes after container payload", offset);
  }
  return c;
}

void write_embeddings(const std::string& path, const Tensor& image_emb, const Tensor& class_emb,
                      const std::vector<std::uint32_t>& labels) {
  if (image_emb.cols() != class_emb.cols()) {
    throw dimension_error("write_embeddings: widths disagree: " +
                          shape_to_string(image_emb.shape()) + " vs " +
                          shape_to_string(class_emb.shape()));
  }
  if (image_emb.rows() != labels.size()) {
    throw dimension_error("write_embeddings: " + std::to_string(image_emb.rows()) +
                          " rows vs " + std::to_string(labels.size()) + " labels");
  }
  EmbeddingContainer c;
  c.n = static_cast<std::uint32_t>(image_emb.rows());
  c.dim = static_cast<std::uint32_t>(image_emb.cols());
  c.num_classes = static_cast<std::uint32_t>(class_emb.rows());
  c.image_embeddings.reserve(image_emb.size());
  for (double v : image_emb.values()) c.image_embeddings.push_back(static_cast<float>(v));
  c.class_embeddings.reserve(class_emb.size());
  for (double v : class_emb.values()) c.class_embeddings.push_back(static_cast<float>(v));
  c.labels = labels;
  write_container(path, c);
}

Task import_embeddings(const std::string& path) {
  const EmbeddingContainer c = read_container(path);
  constexpr std::size_t header_bytes = 8 + 4 * sizeof(std::uint32_t);

  std::vector<std::size_t> per_class(c.num_classes, 0);
  for (std::size_t i = 0; i < c.labels.size(); ++i) {
    if (c.labels[i] >= c.num_classes) {
      throw label_error("label " + std::to_string(c.labels[i]) + " at sample " +
                        std::to_string(i) + " is outside [0, " + std::to_string(c.num_classes) +
                        ")");
    }
    per_class[c.labels[i]]++;
  }
  for (std::size_t k = 0; k < c.num_classes; ++k) {
    if (per_class[k] == 0) {
      throw label_error("class " + std::to_string(k) + " has no samples");
    }
  }

  auto widen_unit = [&](const std::vector<float>& src, std::size_t rows, std::size_t byte_base,
                        const char* what) {
    const std::size_t d = c.dim;
    std::vector<double> out(src.size());
    for (std::size_t i = 0; i < src.size(); ++i) out[i] = static_cast<double>(src[i]);
    for (std::size_t r = 0; r < rows; ++r) {
      double sq = 0.0;
      for (std::size_t j = 0; j < d; ++j) sq += out[r * d + j] * out[r * d + j];
      const double norm = std::sqrt(sq);
      if (std::abs(norm - 1.0) > 1e-3) {
        throw format_error(std::string(what) + " row " + std::to_string(r) + " has norm " +
                               std::to_string(norm) + ", outside the 1e-3 tolerance",
                           byte_base + r * d * sizeof(float));
      }
      normalize_in_place(out, d, r);
    }
    return out;
  };

  Task task;
  task.mode = TaskMode::precomputed;
  task.num_classes = c.num_classes;
  task.labels = c.labels;
  task.inputs = Tensor::from(
      {c.n, c.dim}, widen_unit(c.image_embeddings, c.n, header_bytes, "image embedding"));
  task.class_tokens = Tensor::from(
      {c.num_classes, c.dim},
      widen_unit(c.class_embeddings, c.num_classes,
                 header_bytes + c.image_embeddings.size() * sizeof(float), "class embedding"));
  return task;
}

}  // namespace limo
