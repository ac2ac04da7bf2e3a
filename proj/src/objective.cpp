#include "limo/objective.hpp"

#include <cmath>
#include <string>

namespace limo {

void LossWeights::validate() const {
  if (lambda_ent < 0.0 || lambda_cond < 0.0 || lambda_text < 0.0) {
    throw config_error("loss weights must be nonnegative");
  }
}

namespace {

void require_unit_rows(const Tensor& t, const char* what) {
  std::span<const double> v = t.values();
  const std::size_t n = t.rows(), d = t.cols();
  for (std::size_t i = 0; i < n; ++i) {
    double sq = 0.0;
    for (std::size_t j = 0; j < d; ++j) sq += v[i * d + j] * v[i * d + j];
    if (std::abs(std::sqrt(sq) - 1.0) > 1e-6) {
      throw contract_error(std::string(what) + ": row " + std::to_string(i) +
                           " is not unit-norm (norm " + std::to_string(std::sqrt(sq)) + ")");
    }
  }
}

}  // namespace

Tensor logits(const Tensor& image_emb, const Tensor& class_emb) {
  if (image_emb.cols() != class_emb.cols()) {
    throw dimension_error("logits: embedding widths disagree: " +
                          shape_to_string(image_emb.shape()) + " vs " +
                          shape_to_string(class_emb.shape()));
  }
  require_unit_rows(image_emb, "logits: image embeddings");
  require_unit_rows(class_emb, "logits: class embeddings");
  return matmul(image_emb, transpose(class_emb));
}

Posterior posterior(const Tensor& logits, double tau) {
  if (!(tau > 0.0)) {
    throw domain_error("posterior: temperature must be positive, got " + std::to_string(tau));
  }
  return Posterior{softmax_rows(logits, tau), PosteriorSource::live};
}

Posterior make_snapshot(const Posterior& p) {
  return Posterior{p.probs.detach(), PosteriorSource::zero_shot_snapshot};
}

Tensor cross_entropy(const Posterior& support, const Tensor& onehot_labels) {
  const Tensor& p = support.probs;
  if (p.shape() != onehot_labels.shape()) {
    throw dimension_error("cross_entropy: posterior " + shape_to_string(p.shape()) +
                          " vs labels " + shape_to_string(onehot_labels.shape()));
  }
  std::span<const double> z = onehot_labels.values();
  const std::size_t n = onehot_labels.rows(), k = onehot_labels.cols();
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t ones = 0;
    for (std::size_t j = 0; j < k; ++j) {
      const double v = z[i * k + j];
      if (v == 1.0) {
        ++ones;
      } else if (v != 0.0) {
        throw label_error("cross_entropy: row " + std::to_string(i) +
                          " is not one-hot (entry " + std::to_string(v) + ")");
      }
    }
    if (ones != 1) {
      throw label_error("cross_entropy: row " + std::to_string(i) + " has " +
                        std::to_string(ones) + " active labels");
    }
  }
  return scale(sum(mul(onehot_labels, log(p))), -1.0 / static_cast<double>(n));
}

Tensor conditional_entropy(const Posterior& query) {
  const Tensor& p = query.probs;
  if (p.rows() == 0) throw contract_error("conditional_entropy over an empty query set");
  return scale(sum(mul(p, log(p))), -1.0 / static_cast<double>(p.rows()));
}

Tensor marginal_entropy(const Posterior& query) {
  const Tensor& p = query.probs;
  if (p.rows() == 0) throw contract_error("marginal_entropy over an empty query set");
  Tensor pbar = mean_rows(p);
  return neg(sum(mul(pbar, log(pbar))));
}

Tensor kl_text(const Posterior& live, const Posterior& snapshot, double lambda_text) {
  if (snapshot.source != PosteriorSource::zero_shot_snapshot) {
    throw contract_error("kl_text: second argument must be a zero-shot snapshot");
  }
  if (live.probs.shape() != snapshot.probs.shape()) {
    throw contract_error("kl_text: posterior " + shape_to_string(live.probs.shape()) +
                         " vs snapshot " + shape_to_string(snapshot.probs.shape()));
  }
  const Tensor& p = live.probs;
  // The snapshot is a detached constant, so log(snapshot) carries no gradient.
  // Normalized by the query count: an unnormalized sum makes the anchor
  // strength grow linearly with |Q| (at 250 queries the default weight pins
  // the posterior to the zero-shot predictions and the transductive terms
  // cannot act), so lambda_text weighs the mean divergence instead.
  Tensor raw = scale(sum(mul(p, sub(log(p), log(snapshot.probs)))),
                     1.0 / static_cast<double>(p.rows()));
  return scale(raw, lambda_text);
}

std::pair<Tensor, LossReport> limo_loss(const Tensor& image_emb, std::size_t n_support,
                                        const Tensor& class_emb, const Tensor& support_onehot,
                                        const Posterior& zero_shot, const LossWeights& weights,
                                        double tau, bool include_ce) {
  weights.validate();
  const std::size_t n = image_emb.rows();
  if (n_support > n) {
    throw contract_error("limo_loss: support block " + std::to_string(n_support) +
                         " exceeds " + std::to_string(n) + " rows");
  }
  const std::size_t n_query = n - n_support;
  if (n_query == 0) throw contract_error("limo_loss: query block is empty");
  if (include_ce && n_support == 0) {
    throw contract_error("limo_loss: cross-entropy enabled with an empty support block");
  }

  Posterior post = posterior(logits(image_emb, class_emb), tau);
  Posterior post_query{slice_rows(post.probs, n_support, n), PosteriorSource::live};

  LossReport report;
  report.weights = weights;
  report.tau = tau;

  Tensor total;
  auto accumulate = [&total](const Tensor& term) {
    total = total.defined() ? add(total, term) : term;
  };

  if (include_ce && n_support > 0) {
    Posterior post_support{slice_rows(post.probs, 0, n_support), PosteriorSource::live};
    Tensor ce = cross_entropy(post_support, support_onehot);
    report.ce = ce.value();
    accumulate(ce);
  }

  if (weights.lambda_cond != 0.0) {
    Tensor cond = conditional_entropy(post_query);
    report.cond_entropy = cond.value();
    accumulate(scale(cond, weights.lambda_cond));
  } else {
    TapeSuspend off;
    report.cond_entropy = conditional_entropy(post_query).value();
  }

  if (weights.lambda_ent != 0.0) {
    Tensor marg = marginal_entropy(post_query);
    report.marg_entropy = marg.value();
    accumulate(neg(scale(marg, weights.lambda_ent)));
  } else {
    TapeSuspend off;
    report.marg_entropy = marginal_entropy(post_query).value();
  }

  if (weights.lambda_text != 0.0) {
    Tensor kl = kl_text(post_query, zero_shot, 1.0);
    report.kl_text = kl.value();
    accumulate(scale(kl, weights.lambda_text));
  }

  if (!total.defined()) total = Tensor::scalar(0.0);
  report.total = total.value();
  return {std::move(total), report};
}

}  // namespace limo
