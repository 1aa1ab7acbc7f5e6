#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "skelgraph/diffarray.hpp"

namespace skelgraph {

template <typename T>
struct GradCheckEntry {
  std::string name;
  T max_rel_err = 0;
  bool passed = true;
};

template <typename T>
struct GradCheckResult {
  bool passed = true;
  T max_rel_err = 0;
  std::vector<GradCheckEntry<T>> params;
  std::string diagnostic;  // set when the function produced a non-finite value
};

// Compares the tape's analytic gradients against central finite differences.
// `build_loss` must rebuild the scalar loss from the current leaf values each
// time it is called. Relative error uses a magnitude floor so that near-zero
// gradients are compared absolutely.
template <typename T>
GradCheckResult<T> gradient_check(const std::function<DiffArrayPtr<T>(Tape<T>&)>& build_loss,
                                  const std::vector<std::pair<std::string, DiffArrayPtr<T>>>& leaves,
                                  T tolerance, T floor = T(1e-4)) {
  GradCheckResult<T> result;

  auto eval = [&](bool with_backward) -> T {
    Tape<T> tape;
    auto loss = build_loss(tape);
    if (loss->numel() != 1) throw UsageError("gradient_check: loss must be scalar");
    if (with_backward) {
      for (const auto& [name, p] : leaves) {
        (void)name;
        p->zero_grad();
      }
      tape.backward(loss);
    }
    return loss->data[0];
  };

  std::vector<std::vector<T>> analytic;
  try {
    eval(true);
  } catch (const NumericError& e) {
    result.passed = false;
    result.diagnostic = e.what();
    return result;
  }
  analytic.reserve(leaves.size());
  for (const auto& [name, p] : leaves) {
    (void)name;
    analytic.push_back(p->grad_or_zeros());
  }

  // step scaled to the value magnitude
  const T h0 = std::cbrt(std::numeric_limits<T>::epsilon());
  for (std::size_t pi = 0; pi < leaves.size(); ++pi) {
    auto& p = leaves[pi].second;
    GradCheckEntry<T> entry;
    entry.name = leaves[pi].first;
    for (std::size_t i = 0; i < p->numel(); ++i) {
      const T x0 = p->data[i];
      const T h = h0 * std::max(std::abs(x0), T(1));
      T fp, fm;
      try {
        p->data[i] = x0 + h;
        fp = eval(false);
        p->data[i] = x0 - h;
        fm = eval(false);
      } catch (const NumericError& e) {
        p->data[i] = x0;
        result.passed = false;
        result.diagnostic = e.what();
        return result;
      }
      p->data[i] = x0;
      const T numeric = (fp - fm) / (2 * h);
      const T a = analytic[pi][i];
      const T denom = std::max({std::abs(a), std::abs(numeric), floor});
      const T rel = std::abs(a - numeric) / denom;
      entry.max_rel_err = std::max(entry.max_rel_err, rel);
    }
    entry.passed = entry.max_rel_err < tolerance;
    result.max_rel_err = std::max(result.max_rel_err, entry.max_rel_err);
    result.passed = result.passed && entry.passed;
    result.params.push_back(std::move(entry));
  }
  return result;
}

}  // namespace skelgraph
