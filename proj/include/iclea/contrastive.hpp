#pragma once

// NCE and ICL losses, the momentum update and per-graph negative queues.
//
// For an anchor v_x with positive p_x and negatives n_1..n_r:
//
//   nce_x = -log( exp(v_x.p_x / tau) / (exp(v_x.p_x / tau) + sum_k exp(v_x.n_k / tau)) )
//
// Losses are averaged over the rows of a batch.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <optional>
#include <string>
#include <vector>

#include "iclea/aggregator.hpp"
#include "iclea/error.hpp"
#include "iclea/kg.hpp"
#include "iclea/matrix.hpp"
#include "iclea/tensor.hpp"

namespace iclea {

inline void check_temperature(double tau) {
  if (!(tau > 0.0) || !std::isfinite(tau)) throw ConfigError("temperature tau must be > 0, got " + std::to_string(tau));
}

// Per-row NCE terms [b]. Row x uses anchor v[x], positive pos[x] and every
// row of neg except those flagged in exclude[x * neg.rows + k]. An empty
// exclusion mask excludes nothing. A row left with no negatives contributes 0.
// Gradients flow to every input that requires grad.
template <class T>
ad::Tensor<T> nce_rows(const ad::Tensor<T>& v, const ad::Tensor<T>& pos, const ad::Tensor<T>& neg, double tau,
                       std::vector<unsigned char> exclude = {}) {
  check_temperature(tau);
  if (v.rank() != 2 || pos.shape() != v.shape()) throw ShapeError("nce_rows: v and pos must be equal-shaped matrices, got " + ad::shape_str(v.shape()) + " and " + ad::shape_str(pos.shape()));
  const std::size_t b = v.rows(), d = v.cols();
  const std::size_t r = neg.defined() && neg.size() ? neg.rows() : 0;
  if (r && (neg.rank() != 2 || neg.cols() != d)) throw ShapeError("nce_rows: negatives must have " + std::to_string(d) + " columns");
  if (!exclude.empty() && exclude.size() != b * r) throw ShapeError("nce_rows: exclusion mask must be b x r");

  const auto vv = v.values(), pv = pos.values();
  const std::span<const T> nv = r ? neg.values() : std::span<const T>();
  const double inv_tau = 1.0 / tau;
  // Softmax weights per row: w0 for the positive, then one per negative.
  std::vector<double> weights(b * (r + 1), 0.0);
  std::vector<T> out(b);
  std::vector<double> logits(r + 1);
  for (std::size_t x = 0; x < b; ++x) {
    auto dotp = [&](std::span<const T> other, std::size_t row) {
      double acc = 0.0;
      for (std::size_t c = 0; c < d; ++c) acc += static_cast<double>(vv[x * d + c]) * static_cast<double>(other[row * d + c]);
      return acc * inv_tau;
    };
    logits[0] = dotp(pv, x);
    double mx = logits[0];
    for (std::size_t k = 0; k < r; ++k) {
      if (!exclude.empty() && exclude[x * r + k]) {
        logits[k + 1] = -INFINITY;
        continue;
      }
      logits[k + 1] = dotp(nv, k);
      mx = std::max(mx, logits[k + 1]);
    }
    double z = 0.0;
    for (std::size_t k = 0; k <= r; ++k)
      if (logits[k] != -INFINITY) z += std::exp(logits[k] - mx);
    const double lse = mx + std::log(z);
    out[x] = static_cast<T>(lse - logits[0]);
    for (std::size_t k = 0; k <= r; ++k) weights[x * (r + 1) + k] = logits[k] == -INFINITY ? 0.0 : std::exp(logits[k] - lse);
  }

  std::vector<ad::Tensor<T>> inputs{v, pos};
  if (r) inputs.push_back(neg);
  return ad::make_op<T>({b}, std::move(out), inputs,
                        [b, d, r, inv_tau, weights = std::move(weights)](const ad::Node<T>& self, std::span<const T> g, std::span<std::vector<T>*> pg) {
                          const auto& vv = self.in(0);
                          const auto& pv = self.in(1);
                          static const std::vector<T> empty;
                          const auto& nv = r ? self.in(2) : empty;
                          for (std::size_t x = 0; x < b; ++x) {
                            const double gx = static_cast<double>(g[x]) * inv_tau;
                            const double* w = weights.data() + x * (r + 1);
                            const double c0 = w[0] - 1.0;
                            if (pg[0]) {
                              for (std::size_t c = 0; c < d; ++c) {
                                double acc = c0 * static_cast<double>(pv[x * d + c]);
                                for (std::size_t k = 0; k < r; ++k)
                                  if (w[k + 1] != 0.0) acc += w[k + 1] * static_cast<double>(nv[k * d + c]);
                                (*pg[0])[x * d + c] += static_cast<T>(gx * acc);
                              }
                            }
                            if (pg[1])
                              for (std::size_t c = 0; c < d; ++c) (*pg[1])[x * d + c] += static_cast<T>(gx * c0 * static_cast<double>(vv[x * d + c]));
                            if (r && pg[2])
                              for (std::size_t k = 0; k < r; ++k) {
                                if (w[k + 1] == 0.0) continue;
                                for (std::size_t c = 0; c < d; ++c) (*pg[2])[k * d + c] += static_cast<T>(gx * w[k + 1] * static_cast<double>(vv[x * d + c]));
                              }
                          }
                        });
}

// Batch-mean NCE with negatives shared by every row.
template <class T>
ad::Tensor<T> nce_loss(const ad::Tensor<T>& v, const ad::Tensor<T>& v_momentum, const ad::Tensor<T>& negatives, double tau) {
  return ad::mean(nce_rows(v, v_momentum, negatives, tau));
}

struct IclInputs {
  std::vector<unsigned char> has_partner;     // one flag per row
  std::vector<unsigned char> same_exclude;    // b x |same negatives|, may be empty
  std::vector<unsigned char> cross_exclude;   // b x |cross negatives|, may be empty
};

// beta * NCE(same-graph negatives) + (1 - beta) * NCE(cross-graph negatives),
// both with the pseudo-partner as positive, averaged over rows that have a
// partner. Exactly zero when no row has one.
template <class T>
ad::Tensor<T> icl_loss(const ad::Tensor<T>& v, const ad::Tensor<T>& v_pseudo, const ad::Tensor<T>& same_negatives,
                       const ad::Tensor<T>& cross_negatives, double tau, double beta, const IclInputs& in) {
  check_temperature(tau);
  if (!(beta >= 0.0 && beta <= 1.0)) throw ConfigError("beta must lie in [0, 1], got " + std::to_string(beta));
  const std::size_t b = v.rows();
  if (in.has_partner.size() != b) throw ShapeError("icl_loss: mask length must equal the batch size");
  std::vector<std::size_t> keep;
  for (std::size_t x = 0; x < b; ++x)
    if (in.has_partner[x]) keep.push_back(x);
  if (keep.empty()) return ad::Tensor<T>::scalar(T(0));

  auto select = [&](const std::vector<unsigned char>& mask, std::size_t r) {
    if (mask.empty()) return std::vector<unsigned char>{};
    std::vector<unsigned char> out;
    out.reserve(keep.size() * r);
    for (auto x : keep) out.insert(out.end(), mask.begin() + static_cast<std::ptrdiff_t>(x * r), mask.begin() + static_cast<std::ptrdiff_t>((x + 1) * r));
    return out;
  };
  const auto rows_of = [](const ad::Tensor<T>& t) { return t.defined() && t.size() ? t.rows() : std::size_t{0}; };
  const auto vk = keep.size() == b ? v : ad::gather(v, keep);
  const auto pk = keep.size() == b ? v_pseudo : ad::gather(v_pseudo, keep);
  const auto same = ad::mean(nce_rows(vk, pk, same_negatives, tau, select(in.same_exclude, rows_of(same_negatives))));
  const auto cross = ad::mean(nce_rows(vk, pk, cross_negatives, tau, select(in.cross_exclude, rows_of(cross_negatives))));
  return ad::add(ad::scale(same, static_cast<T>(beta)), ad::scale(cross, static_cast<T>(1.0 - beta)));
}

template <class T>
ad::Tensor<T> total_loss(const ad::Tensor<T>& nce, const ad::Tensor<T>& icl) {
  return ad::add(nce, icl);
}

// theta' <- m theta' + (1 - m) theta, written as theta' += (1 - m)(theta - theta')
// and evaluated in double.
template <class T>
void momentum_update(const AggregatorParams<T>& online, AggregatorParams<T>& momentum, double m) {
  if (!(m >= 0.0 && m < 1.0)) throw ConfigError("momentum m must lie in [0, 1), got " + std::to_string(m));
  const auto src = online.tensors();
  auto dst = momentum.tensors();
  if (src.size() != dst.size()) throw ContractError("momentum_update: parameter sets differ in structure");
  for (std::size_t k = 0; k < src.size(); ++k) {
    if (src[k].shape() != dst[k].shape()) throw ContractError("momentum_update: shape mismatch in tensor " + std::to_string(k));
    const auto s = src[k].values();
    auto t = dst[k].mutable_values();
    for (std::size_t i = 0; i < t.size(); ++i) {
      t[i] = static_cast<T>(m * static_cast<double>(t[i]) + (1.0 - m) * static_cast<double>(s[i]));
    }
  }
}

// (L+1) * B <= min(|E1|, |E2|).
inline void check_queue_constraint(std::size_t batch, std::size_t queue_length, std::size_t n1, std::size_t n2) {
  if (batch == 0) throw ConfigError("batch size must be positive");
  const std::size_t need = (queue_length + 1) * batch;
  if (need > std::min(n1, n2))
    throw ConstraintError("(L+1)*B = " + std::to_string(need) + " exceeds min(|E1|, |E2|) = " + std::to_string(std::min(n1, n2)) +
                          " (L=" + std::to_string(queue_length) + ", B=" + std::to_string(batch) + ")");
}

struct QueuedBatch {
  std::vector<EntityId> ids;
  Matrix embeddings;  // momentum-encoder output cached at push time
};

// FIFO of at most L+1 batches for one graph.
class NegativeQueue {
 public:
  NegativeQueue(std::size_t queue_length, std::size_t batch, int graph = 0) : length_(queue_length), batch_(batch), graph_(graph) {}

  // Appends at the tail. Once L+1 batches are held the head is removed and
  // returned as the positive batch.
  std::optional<QueuedBatch> push(QueuedBatch b) {
    if (b.ids.size() != batch_) throw ContractError("queue push: batch has " + std::to_string(b.ids.size()) + " ids, expected " + std::to_string(batch_));
    if (b.embeddings.rows != b.ids.size()) throw ContractError("queue push: cached embeddings do not match ids");
    batches_.push_back(std::move(b));
    if (batches_.size() < length_ + 1) return std::nullopt;
    QueuedBatch head = std::move(batches_.front());
    batches_.pop_front();
    return head;
  }

  std::size_t size() const { return batches_.size(); }
  std::size_t capacity() const { return length_ + 1; }
  std::size_t batch_size() const { return batch_; }
  int graph() const { return graph_; }
  const std::deque<QueuedBatch>& batches() const { return batches_; }

  std::vector<EntityId> ids() const {
    std::vector<EntityId> out;
    for (const auto& b : batches_) out.insert(out.end(), b.ids.begin(), b.ids.end());
    return out;
  }

  // All cached embeddings stacked in queue order.
  Matrix embeddings() const {
    const std::size_t d = batches_.empty() ? 0 : batches_.front().embeddings.cols;
    Matrix out(batches_.size() * batch_, d);
    std::size_t at = 0;
    for (const auto& b : batches_) {
      std::copy(b.embeddings.data.begin(), b.embeddings.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(at));
      at += b.embeddings.data.size();
    }
    return out;
  }

 private:
  std::size_t length_;
  std::size_t batch_;
  int graph_;
  std::deque<QueuedBatch> batches_;
};

template <class T>
ad::Tensor<T> to_tensor(const Matrix& m) {
  return ad::Tensor<T>::matrix(m.rows, m.cols, std::vector<T>(m.data.begin(), m.data.end()));
}

}  // namespace iclea
