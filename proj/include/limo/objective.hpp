#pragma once

#include <cstddef>
#include <utility>

#include "limo/tensor.hpp"

namespace limo {

struct LossWeights {
  double lambda_ent = 10.0;   // marginal entropy, maximized
  double lambda_cond = 1.0;   // conditional entropy, minimized
  double lambda_text = 0.1;   // KL anchor to the zero-shot predictions

  void validate() const;
};

enum class PosteriorSource { live, zero_shot_snapshot };

// Row-stochastic class probabilities over a sample set.
struct Posterior {
  Tensor probs;  // [n x K], rows sum to 1
  PosteriorSource source = PosteriorSource::live;
};

// Per-term values of one loss evaluation. kl_text is the unweighted KL sum;
// total applies the weights:
//   total = ce - lambda_ent * marg_entropy + lambda_cond * cond_entropy
//         + lambda_text * kl_text
struct LossReport {
  double ce = 0.0;
  double cond_entropy = 0.0;
  double marg_entropy = 0.0;
  double kl_text = 0.0;
  double total = 0.0;
  LossWeights weights;
  double tau = 0.0;

  double recomposed() const {
    return ce - (weights.lambda_ent * marg_entropy - weights.lambda_cond * cond_entropy) +
           weights.lambda_text * kl_text;
  }
};

// Cosine similarities between unit-norm image and class embeddings.
Tensor logits(const Tensor& image_emb, const Tensor& class_emb);

// Temperature softmax over logit rows.
Posterior posterior(const Tensor& logits, double tau);

// Detached copy marked as the fixed zero-shot anchor.
Posterior make_snapshot(const Posterior& p);

// Mean negative log-likelihood of one-hot labels over the support rows.
Tensor cross_entropy(const Posterior& support, const Tensor& onehot_labels);

// Mean per-row entropy over the query rows.
Tensor conditional_entropy(const Posterior& query);

// Entropy of the row-averaged class distribution over the query rows.
Tensor marginal_entropy(const Posterior& query);

// lambda_text * mean_i KL(p_i || snapshot_i); no gradient flows into the
// snapshot. The mean keeps the anchor strength independent of the query size.
Tensor kl_text(const Posterior& live, const Posterior& snapshot, double lambda_text);

// Full objective over embeddings stacked support-first. The support block is
// rows [0, n_support); everything after is the query block. Terms with a zero
// weight are evaluated off the tape for reporting only, so they leave no
// trace in the gradient.
std::pair<Tensor, LossReport> limo_loss(const Tensor& image_emb, std::size_t n_support,
                                        const Tensor& class_emb, const Tensor& support_onehot,
                                        const Posterior& zero_shot, const LossWeights& weights,
                                        double tau, bool include_ce = true);

}  // namespace limo
