#pragma once

#include <cstddef>
#include <utility>
#include <vector>

#include "skelgraph/diffarray.hpp"

namespace skelgraph {

struct LossWeights {
  double lambda1 = 0.0005;  // cosine term
  double lambda2 = 0.1;     // pairwise-distance term
};

inline std::vector<std::pair<std::size_t, std::size_t>> consecutive_pairs(std::size_t joints) {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t i = 0; i + 1 < joints; ++i) pairs.emplace_back(i, i + 1);
  return pairs;
}

inline std::vector<std::pair<std::size_t, std::size_t>> all_joint_pairs(std::size_t joints) {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t j = 0; j < joints; ++j)
    for (std::size_t i = j + 1; i < joints; ++i) pairs.emplace_back(i, j);
  return pairs;
}

namespace detail {

template <typename T>
void check_pose_pair(const DiffArrayPtr<T>& truth, const DiffArrayPtr<T>& pred, const char* op) {
  check_same_shape(op, *truth, *pred);
  if (truth->rank() < 2) throw ShapeError(std::string(op) + ": poses must be [...,J,3]");
  if (truth->shape[truth->rank() - 2] < 2) {
    throw ShapeError(std::string(op) + ": at least two joints required");
  }
}

}  // namespace detail

// Mean |C(P_i,P_i+1) - C(P~_i,P~_i+1)| over timesteps and joint pairs. The
// default pairing follows joint index order; pass an explicit pair list to
// use bone topology instead.
template <typename T>
DiffArrayPtr<T> scl_cos(Tape<T>& tape, const DiffArrayPtr<T>& truth, const DiffArrayPtr<T>& pred,
                        const std::vector<std::pair<std::size_t, std::size_t>>* pairs = nullptr,
                        T eps = T(1e-8)) {
  detail::check_pose_pair(truth, pred, "scl_cos");
  const std::size_t axis = truth->rank() - 2;
  const std::size_t joints = truth->shape[axis];
  std::vector<std::pair<std::size_t, std::size_t>> defaults;
  if (pairs == nullptr) {
    defaults = consecutive_pairs(joints);
    pairs = &defaults;
  }
  std::vector<std::size_t> first, second;
  for (const auto& [i, j] : *pairs) {
    first.push_back(i);
    second.push_back(j);
  }
  auto c_truth = cosine_last(tape, index_select(tape, truth, axis, first),
                             index_select(tape, truth, axis, second), eps);
  auto c_pred = cosine_last(tape, index_select(tape, pred, axis, first),
                            index_select(tape, pred, axis, second), eps);
  return mean(tape, absval(tape, sub(tape, c_truth, c_pred)));
}

// Mean |dist(P_i,P_j) - dist(P~_i,P~_j)| over timesteps and unordered joint
// pairs; equals the 2/(T~ J (J-1)) normalization of the pairwise sum.
template <typename T>
DiffArrayPtr<T> scl_l2(Tape<T>& tape, const DiffArrayPtr<T>& truth, const DiffArrayPtr<T>& pred) {
  detail::check_pose_pair(truth, pred, "scl_l2");
  const std::size_t joints = truth->shape[truth->rank() - 2];
  const auto pairs = all_joint_pairs(joints);
  auto d_truth = pair_dist_last(tape, truth, pairs);
  auto d_pred = pair_dist_last(tape, pred, pairs);
  return mean(tape, absval(tape, sub(tape, d_truth, d_pred)));
}

template <typename T>
DiffArrayPtr<T> scl(Tape<T>& tape, const DiffArrayPtr<T>& truth, const DiffArrayPtr<T>& pred,
                    const LossWeights& w,
                    const std::vector<std::pair<std::size_t, std::size_t>>* cos_pairs = nullptr) {
  if (w.lambda1 < 0 || w.lambda2 < 0) throw UsageError("scl: loss weights must be >= 0");
  auto cos_term = scale(tape, scl_cos(tape, truth, pred, cos_pairs), static_cast<T>(w.lambda1));
  auto l2_term = scale(tape, scl_l2(tape, truth, pred), static_cast<T>(w.lambda2));
  return add(tape, cos_term, l2_term);
}

// Squared-error data term averaged over timesteps and joints, plus the
// consistency terms.
template <typename T>
DiffArrayPtr<T> total_loss(Tape<T>& tape, const DiffArrayPtr<T>& truth, const DiffArrayPtr<T>& pred,
                           const LossWeights& w,
                           const std::vector<std::pair<std::size_t, std::size_t>>* cos_pairs = nullptr) {
  detail::check_pose_pair(truth, pred, "total_loss");
  auto diff = sub(tape, pred, truth);
  auto sq = mul(tape, diff, diff);
  const T coords = static_cast<T>(truth->shape.back());
  auto data_term = scale(tape, sum(tape, sq), coords / static_cast<T>(truth->numel()));
  return add(tape, data_term, scl(tape, truth, pred, w, cos_pairs));
}

}  // namespace skelgraph
