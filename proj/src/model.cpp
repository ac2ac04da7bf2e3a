#include "limo/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace limo {

std::string strategy_name(Strategy s) {
  switch (s) {
    case Strategy::lora: return "lora";
    case Strategy::lvp: return "lvp";
    case Strategy::prompt: return "prompt";
    case Strategy::frozen: return "frozen";
  }
  return "?";
}

Strategy parse_strategy(const std::string& name) {
  if (name == "lora") return Strategy::lora;
  if (name == "lvp") return Strategy::lvp;
  if (name == "prompt") return Strategy::prompt;
  if (name == "frozen") return Strategy::frozen;
  throw config_error("unknown strategy '" + name + "' (expected lora|lvp|prompt|frozen)");
}

namespace {

Tensor kaiming(Rng& rng, std::size_t out_dim, std::size_t in_dim) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(in_dim));
  return Tensor::gaussian({out_dim, in_dim}, rng, stddev);
}

}  // namespace

Tensor lora_forward(const Tensor& input, const Tensor& frozen_weight, const LoraAdapter& adapter,
                    bool training, Rng& rng) {
  Tensor base = matmul(input, transpose(frozen_weight));
  Tensor regularized = dropout(input, adapter.dropout_p, training, rng);
  Tensor update = matmul(matmul(regularized, transpose(adapter.A)), transpose(adapter.B));
  return add(base, scale(update, adapter.gamma));
}

TwoTowerModel TwoTowerModel::build(const TowerConfig& cfg, Strategy strategy,
                                   const ModelOptions& options) {
  if (cfg.input_dim < 1 || cfg.hidden_dim < 1 || cfg.embed_dim < 1 || cfg.num_blocks < 1) {
    throw config_error("tower dimensions and block count must be at least 1");
  }
  if (strategy == Strategy::lora &&
      (options.rank < 1 || options.rank >= cfg.hidden_dim)) {
    throw config_error("adapter rank " + std::to_string(options.rank) +
                       " must satisfy 1 <= rank < hidden_dim (" +
                       std::to_string(cfg.hidden_dim) + ")");
  }
  if (strategy == Strategy::prompt && options.num_classes < 2) {
    throw config_error("prompt strategy needs num_classes >= 2 at build time");
  }

  TwoTowerModel m;
  m.cfg_ = cfg;
  m.strategy_ = strategy;
  m.tau_ = options.tau;

  // Draw one prototype tower and copy it into both sides so the frozen pair
  // agrees on nearby inputs; adapters come from a separate substream so the
  // tower weights are identical across strategies for the same seed.
  Rng init = Rng(cfg.seed).derive("tower-init");
  const std::size_t h = cfg.hidden_dim;
  const std::size_t ff = 2 * h;
  Tower proto;
  proto.in_proj = kaiming(init, h, cfg.input_dim);
  proto.blocks.resize(cfg.num_blocks);
  for (Block& b : proto.blocks) {
    b.wq = kaiming(init, h, h);
    b.wk = kaiming(init, h, h);
    b.wv = kaiming(init, h, h);
    b.wo = kaiming(init, h, h);
    b.ff1 = kaiming(init, ff, h);
    b.ff2 = kaiming(init, h, ff);
  }
  proto.out_proj = kaiming(init, cfg.embed_dim, h);

  auto clone_tower = [](const Tower& t) {
    Tower out;
    out.in_proj = t.in_proj.detach();
    for (const Block& b : t.blocks) {
      Block c;
      c.wq = b.wq.detach();
      c.wk = b.wk.detach();
      c.wv = b.wv.detach();
      c.wo = b.wo.detach();
      c.ff1 = b.ff1.detach();
      c.ff2 = b.ff2.detach();
      out.blocks.push_back(std::move(c));
    }
    out.out_proj = t.out_proj.detach();
    return out;
  };
  m.vision_ = clone_tower(proto);
  m.text_ = clone_tower(proto);

  // Context tokens sit well below the class-token scale: the class row has to
  // dominate the pooled text representation for the frozen pair to match
  // images against the right class.
  m.context_ = Tensor::gaussian({kContextLen, cfg.input_dim}, init,
                                0.25 / std::sqrt(static_cast<double>(cfg.input_dim)));

  if (strategy == Strategy::lora) {
    Rng arng = Rng(cfg.seed).derive("adapters");
    const double gamma =
        options.gamma > 0.0 ? options.gamma : 1.0 / static_cast<double>(options.rank);
    auto attach = [&](Tower& tower, const std::string& prefix) {
      for (std::size_t i = 0; i < tower.blocks.size(); ++i) {
        Block& b = tower.blocks[i];
        auto patch = [&](const char* mat) {
          LoraAdapter a;
          a.target = prefix + ".b" + std::to_string(i) + "." + mat;
          a.rank = options.rank;
          a.gamma = gamma;
          a.dropout_p = options.dropout_p;
          a.A = kaiming(arng, options.rank, h);
          a.A.set_requires_grad(true);
          a.B = Tensor::zeros({h, options.rank});
          a.B.set_requires_grad(true);
          m.adapters_.push_back(std::move(a));
          return static_cast<int>(m.adapters_.size() - 1);
        };
        b.aq = patch("wq");
        b.ak = patch("wk");
        b.av = patch("wv");
      }
    };
    attach(m.vision_, "vision");
    attach(m.text_, "text");
  } else if (strategy == Strategy::lvp) {
    m.vision_.out_proj.set_requires_grad(true);
  } else if (strategy == Strategy::prompt) {
    PromptBank bank;
    for (std::size_t k = 0; k < options.num_classes; ++k) {
      Tensor ctx = m.context_.detach();
      ctx.set_requires_grad(true);
      bank.context.push_back(std::move(ctx));
    }
    m.prompts_ = std::move(bank);
  }
  return m;
}

Tensor TwoTowerModel::encode_images(const Tensor& images, bool training, Rng& rng) const {
  if (images.cols() != cfg_.input_dim) {
    throw dimension_error("encode_images: expected " + std::to_string(cfg_.input_dim) +
                          " columns, got " + shape_to_string(images.shape()));
  }
  Tensor h = matmul(images, transpose(vision_.in_proj));
  for (const Block& b : vision_.blocks) {
    // images are single-token sequences, so attention over one key is exactly
    // the value path; the query/key products cancel out of the result
    Tensor val = b.av >= 0 ? lora_forward(h, b.wv, adapters_[b.av], training, rng)
                           : matmul(h, transpose(b.wv));
    h = add(h, matmul(val, transpose(b.wo)));
    Tensor f = matmul(relu(matmul(h, transpose(b.ff1))), transpose(b.ff2));
    h = add(h, f);
  }
  return l2_normalize_rows(matmul(h, transpose(vision_.out_proj)));
}

Tensor TwoTowerModel::run_text_tower(const Tensor& sequence, bool training, Rng& rng) const {
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(cfg_.hidden_dim));
  Tensor h = matmul(sequence, transpose(text_.in_proj));
  for (const Block& b : text_.blocks) {
    Tensor q = b.aq >= 0 ? lora_forward(h, b.wq, adapters_[b.aq], training, rng)
                         : matmul(h, transpose(b.wq));
    Tensor k = b.ak >= 0 ? lora_forward(h, b.wk, adapters_[b.ak], training, rng)
                         : matmul(h, transpose(b.wk));
    Tensor v = b.av >= 0 ? lora_forward(h, b.wv, adapters_[b.av], training, rng)
                         : matmul(h, transpose(b.wv));
    Tensor att = softmax_rows(scale(matmul(q, transpose(k)), att_scale), 1.0);
    h = add(h, matmul(matmul(att, v), transpose(b.wo)));
    Tensor f = matmul(relu(matmul(h, transpose(b.ff1))), transpose(b.ff2));
    h = add(h, f);
  }
  return matmul(mean_rows(h), transpose(text_.out_proj));
}

Tensor TwoTowerModel::encode_classes(const Tensor& class_tokens, bool training, Rng& rng) const {
  const std::size_t num_classes = class_tokens.rows();
  if (num_classes < 2) {
    throw config_error("encode_classes needs at least 2 classes, got " +
                       std::to_string(num_classes));
  }
  if (class_tokens.cols() != cfg_.input_dim) {
    throw dimension_error("encode_classes: expected " + std::to_string(cfg_.input_dim) +
                          " columns, got " + shape_to_string(class_tokens.shape()));
  }
  if (prompts_ && prompts_->context.size() != num_classes) {
    throw config_error("prompt bank holds " + std::to_string(prompts_->context.size()) +
                       " classes but " + std::to_string(num_classes) + " tokens were given");
  }
  std::vector<Tensor> rows;
  rows.reserve(num_classes);
  for (std::size_t k = 0; k < num_classes; ++k) {
    const Tensor& ctx = prompts_ ? prompts_->context[k] : context_;
    Tensor seq = concat_rows({ctx, slice_rows(class_tokens, k, k + 1)});
    rows.push_back(run_text_tower(seq, training, rng));
  }
  return l2_normalize_rows(concat_rows(rows));
}

std::vector<Tensor> TwoTowerModel::trainable_tensors() const {
  std::vector<Tensor> out;
  switch (strategy_) {
    case Strategy::lora:
      for (const LoraAdapter& a : adapters_) {
        out.push_back(a.A);
        out.push_back(a.B);
      }
      break;
    case Strategy::lvp:
      out.push_back(vision_.out_proj);
      break;
    case Strategy::prompt:
      for (const Tensor& c : prompts_->context) out.push_back(c);
      break;
    case Strategy::frozen:
      break;
  }
  return out;
}

std::vector<std::pair<std::string, Tensor>> TwoTowerModel::named_tensors() const {
  std::vector<std::pair<std::string, Tensor>> out;
  auto tower = [&](const Tower& t, const std::string& prefix) {
    out.emplace_back(prefix + ".in_proj", t.in_proj);
    for (std::size_t i = 0; i < t.blocks.size(); ++i) {
      const std::string base = prefix + ".b" + std::to_string(i) + ".";
      out.emplace_back(base + "wq", t.blocks[i].wq);
      out.emplace_back(base + "wk", t.blocks[i].wk);
      out.emplace_back(base + "wv", t.blocks[i].wv);
      out.emplace_back(base + "wo", t.blocks[i].wo);
      out.emplace_back(base + "ff1", t.blocks[i].ff1);
      out.emplace_back(base + "ff2", t.blocks[i].ff2);
    }
    out.emplace_back(prefix + ".out_proj", t.out_proj);
  };
  tower(vision_, "vision");
  tower(text_, "text");
  out.emplace_back("text.ctx", context_);
  for (const LoraAdapter& a : adapters_) {
    out.emplace_back(a.target + ".lora_A", a.A);
    out.emplace_back(a.target + ".lora_B", a.B);
  }
  if (prompts_) {
    for (std::size_t k = 0; k < prompts_->context.size(); ++k) {
      out.emplace_back("prompt.ctx" + std::to_string(k), prompts_->context[k]);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoint container: "LIMOCKPT", u32 version, named f64 tensors, adapter
// metadata. Little-endian throughout, matching the embedding container.

namespace {

constexpr char kCheckpointMagic[8] = {'L', 'I', 'M', 'O', 'C', 'K', 'P', 'T'};

template <class T>
void put(std::ofstream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T take(std::ifstream& is, std::size_t& offset) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw format_error("checkpoint truncated", offset);
  offset += sizeof(T);
  return v;
}

}  // namespace

void TwoTowerModel::save_checkpoint(const std::string& path) const {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw format_error("cannot open checkpoint for writing: " + path, 0);
  os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  put<std::uint32_t>(os, 1);
  const auto named = named_tensors();
  put<std::uint32_t>(os, static_cast<std::uint32_t>(named.size()));
  for (const auto& [name, t] : named) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(t.shape().size()));
    for (std::size_t e : t.shape()) put<std::uint64_t>(os, e);
    std::span<const double> v = t.values();
    os.write(reinterpret_cast<const char*>(v.data()),
             static_cast<std::streamsize>(v.size() * sizeof(double)));
  }
  put<std::uint32_t>(os, static_cast<std::uint32_t>(adapters_.size()));
  for (const LoraAdapter& a : adapters_) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(a.target.size()));
    os.write(a.target.data(), static_cast<std::streamsize>(a.target.size()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(a.rank));
    put<double>(os, a.gamma);
    put<double>(os, a.dropout_p);
  }
  if (!os) throw format_error("short write while saving checkpoint: " + path, 0);
}

void TwoTowerModel::load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw format_error("cannot open checkpoint: " + path, 0);
  std::size_t offset = 0;
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw format_error("bad checkpoint magic", 0);
  }
  offset += sizeof(magic);
  const auto version = take<std::uint32_t>(is, offset);
  if (version != 1) throw format_error("unsupported checkpoint version", offset - 4);
  const auto count = take<std::uint32_t>(is, offset);
  auto named = named_tensors();
  if (count != named.size()) {
    throw format_error("checkpoint holds " + std::to_string(count) + " tensors, model expects " +
                           std::to_string(named.size()),
                       offset - 4);
  }
  for (auto& [name, t] : named) {
    const auto name_len = take<std::uint32_t>(is, offset);
    std::string stored(name_len, '\0');
    is.read(stored.data(), name_len);
    if (!is) throw format_error("checkpoint truncated", offset);
    offset += name_len;
    if (stored != name) {
      throw format_error("checkpoint tensor '" + stored + "' does not match expected '" + name +
                             "'",
                       offset - name_len);
    }
    const auto rank = take<std::uint32_t>(is, offset);
    Shape shape(rank);
    for (std::uint32_t i = 0; i < rank; ++i) {
      shape[i] = static_cast<std::size_t>(take<std::uint64_t>(is, offset));
    }
    if (shape != t.shape()) {
      throw format_error("checkpoint shape " + shape_to_string(shape) + " for '" + name +
                             "' does not match " + shape_to_string(t.shape()),
                       offset);
    }
    std::span<double> dst = t.values_mut();
    is.read(reinterpret_cast<char*>(dst.data()),
            static_cast<std::streamsize>(dst.size() * sizeof(double)));
    if (!is) throw format_error("checkpoint truncated", offset);
    offset += dst.size() * sizeof(double);
  }
  const auto adapter_count = take<std::uint32_t>(is, offset);
  if (adapter_count != adapters_.size()) {
    throw format_error("checkpoint adapter count mismatch", offset - 4);
  }
  for (LoraAdapter& a : adapters_) {
    const auto name_len = take<std::uint32_t>(is, offset);
    std::string stored(name_len, '\0');
    is.read(stored.data(), name_len);
    if (!is) throw format_error("checkpoint truncated", offset);
    offset += name_len;
    if (stored != a.target) throw format_error("adapter target mismatch", offset - name_len);
    const auto rank = take<std::uint32_t>(is, offset);
    if (rank != a.rank) throw format_error("adapter rank mismatch", offset - 4);
    a.gamma = take<double>(is, offset);
    a.dropout_p = take<double>(is, offset);
  }
}

// ---------------------------------------------------------------------------
// PrecomputedEncoder

PrecomputedEncoder PrecomputedEncoder::build(std::size_t embed_dim, Strategy strategy,
                                             double tau) {
  if (strategy != Strategy::frozen && strategy != Strategy::lvp) {
    throw config_error("precomputed embeddings support only the frozen and lvp strategies, got " +
                       strategy_name(strategy));
  }
  PrecomputedEncoder enc;
  enc.strategy_ = strategy;
  enc.tau_ = tau;
  if (strategy == Strategy::lvp) {
    std::vector<double> eye(embed_dim * embed_dim, 0.0);
    for (std::size_t i = 0; i < embed_dim; ++i) eye[i * embed_dim + i] = 1.0;
    enc.head_ = Tensor::from({embed_dim, embed_dim}, std::move(eye));
    enc.head_.set_requires_grad(true);
  }
  return enc;
}

Tensor PrecomputedEncoder::encode_images(const Tensor& embeddings, bool, Rng&) const {
  if (strategy_ == Strategy::frozen) return embeddings;
  return l2_normalize_rows(matmul(embeddings, transpose(head_)));
}

Tensor PrecomputedEncoder::encode_classes(const Tensor& class_embeddings, bool, Rng&) const {
  return class_embeddings;
}

std::vector<Tensor> PrecomputedEncoder::trainable_tensors() const {
  if (strategy_ == Strategy::lvp) return {head_};
  return {};
}

std::vector<std::pair<std::string, Tensor>> PrecomputedEncoder::named_tensors() const {
  if (strategy_ == Strategy::lvp) return {{"head", head_}};
  return {};
}

}  // namespace limo
