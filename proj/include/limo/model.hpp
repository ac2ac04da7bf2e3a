#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "limo/tensor.hpp"

namespace limo {

enum class Strategy { lora, lvp, prompt, frozen };

std::string strategy_name(Strategy s);
Strategy parse_strategy(const std::string& name);

struct TowerConfig {
  std::size_t input_dim = 16;
  std::size_t hidden_dim = 16;
  std::size_t embed_dim = 16;  // shared by both towers
  std::size_t num_blocks = 2;
  std::uint64_t seed = 0;
};

// Low-rank patch on a frozen weight: out = W h + gamma * B (A h), dropout on
// the adapter input at train time. B starts at zero so a fresh adapter is a
// no-op.
struct LoraAdapter {
  std::string target;
  Tensor A;  // [rank x in_dim]
  Tensor B;  // [out_dim x rank]
  std::size_t rank = 0;
  double gamma = 0.0;
  double dropout_p = 0.0;
};

Tensor lora_forward(const Tensor& input, const Tensor& frozen_weight, const LoraAdapter& adapter,
                    bool training, Rng& rng);

// Per-class learnable context rows; the class-token row stays frozen.
struct PromptBank {
  std::vector<Tensor> context;  // num_classes tensors of [ctx_len x input_dim]
};

// Number of shared context tokens prepended to every class token.
inline constexpr std::size_t kContextLen = 4;

struct ModelOptions {
  std::size_t rank = 2;
  double gamma = 0.0;  // 0 selects the default 1/rank
  double dropout_p = 0.25;
  double tau = 0.01;
  std::size_t num_classes = 0;  // required by the prompt strategy
};

// Common surface the training loop drives; implemented by the two-tower model
// and by the pass-through encoder for precomputed embeddings.
class Encoder {
 public:
  virtual ~Encoder() = default;
  virtual Tensor encode_images(const Tensor& inputs, bool training, Rng& rng) const = 0;
  virtual Tensor encode_classes(const Tensor& class_tokens, bool training, Rng& rng) const = 0;
  virtual std::vector<Tensor> trainable_tensors() const = 0;
  virtual std::vector<std::pair<std::string, Tensor>> named_tensors() const = 0;
  virtual double temperature() const = 0;
};

// Toy CLIP-style pair of encoders over a shared embedding space. Each tower is
// num_blocks single-head attention blocks plus a final projector; images enter
// as single tokens, classes as kContextLen context tokens followed by one
// class token. Both towers start from identical weights so that the frozen
// model matches images to nearby class tokens, standing in for the alignment
// a contrastively pre-trained encoder pair would have.
class TwoTowerModel final : public Encoder {
 public:
  struct Block {
    Tensor wq, wk, wv, wo;  // [hidden x hidden]
    Tensor ff1;             // [2*hidden x hidden]
    Tensor ff2;             // [hidden x 2*hidden]
    int aq = -1, ak = -1, av = -1;  // adapter indices, -1 when absent
  };

  struct Tower {
    Tensor in_proj;   // [hidden x input]
    std::vector<Block> blocks;
    Tensor out_proj;  // [embed x hidden]
  };

  static TwoTowerModel build(const TowerConfig& cfg, Strategy strategy,
                             const ModelOptions& options = {});

  Tensor encode_images(const Tensor& images, bool training, Rng& rng) const override;
  Tensor encode_classes(const Tensor& class_tokens, bool training, Rng& rng) const override;
  std::vector<Tensor> trainable_tensors() const override;
  std::vector<std::pair<std::string, Tensor>> named_tensors() const override;
  double temperature() const override { return tau_; }

  Strategy strategy() const { return strategy_; }
  const TowerConfig& config() const { return cfg_; }
  const std::vector<LoraAdapter>& adapters() const { return adapters_; }
  const std::optional<PromptBank>& prompts() const { return prompts_; }
  std::optional<PromptBank>& prompts() { return prompts_; }
  const Tower& vision() const { return vision_; }
  const Tower& text() const { return text_; }

  void save_checkpoint(const std::string& path) const;
  void load_checkpoint(const std::string& path);

 private:
  Tensor run_text_tower(const Tensor& sequence, bool training, Rng& rng) const;

  TowerConfig cfg_;
  Strategy strategy_ = Strategy::frozen;
  double tau_ = 0.01;
  Tower vision_;
  Tower text_;
  Tensor context_;  // frozen shared context rows [kContextLen x input_dim]
  std::vector<LoraAdapter> adapters_;
  std::optional<PromptBank> prompts_;
};

// Encoder over precomputed unit-norm embeddings. Strategy frozen passes the
// rows through unchanged; strategy lvp trains an identity-initialized square
// projector on the image side, the analogue of updating only the last visual
// projector.
class PrecomputedEncoder final : public Encoder {
 public:
  static PrecomputedEncoder build(std::size_t embed_dim, Strategy strategy, double tau);

  Tensor encode_images(const Tensor& embeddings, bool training, Rng& rng) const override;
  Tensor encode_classes(const Tensor& class_embeddings, bool training, Rng& rng) const override;
  std::vector<Tensor> trainable_tensors() const override;
  std::vector<std::pair<std::string, Tensor>> named_tensors() const override;
  double temperature() const override { return tau_; }

 private:
  Strategy strategy_ = Strategy::frozen;
  double tau_ = 0.01;
  Tensor head_;  // [d x d], identity at construction; defined only for lvp
};

}  // namespace limo
