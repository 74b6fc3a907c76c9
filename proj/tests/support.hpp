#pragma once

// Shared test oracles. Everything here is deliberately independent of the
// implementation paths it checks: brute-force loops, finite differences,
// exhaustive enumeration.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <vector>

#include "core/rng.hpp"
#include "core/tensor.hpp"

namespace testsupport {

// Central finite differences on selected coordinates of in-place inputs.
// f() must rebuild the graph and return the scalar loss value.
// Returns the max relative error between tape gradients and FD.
struct GradCheck {
  double max_rel_err = 0.0;
  double worst_ad = 0.0, worst_fd = 0.0;
};

inline GradCheck grad_check(std::vector<jigsaw::ad::Tensor>& inputs,
                            const std::function<jigsaw::ad::Tensor()>& f,
                            double h = 1e-5, int max_coords_per_input = 64,
                            uint64_t seed = 1234) {
  using namespace jigsaw::ad;
  jigsaw::Rng rng(seed);

  // Tape gradients.
  std::vector<std::vector<double>> ad_grads;
  {
    TapeScope scope;
    Tensor loss = f();
    backward(loss);
    for (auto& t : inputs) {
      if (t.has_grad()) {
        ad_grads.emplace_back(t.grad(), t.grad() + t.numel());
      } else {
        ad_grads.emplace_back(static_cast<size_t>(t.numel()), 0.0);
      }
      t.zero_grad();
    }
  }

  auto eval = [&]() {
    TapeScope scope;
    return f().scalar_value();
  };

  GradCheck result;
  for (size_t ti = 0; ti < inputs.size(); ++ti) {
    Tensor& t = inputs[ti];
    std::vector<int64_t> coords(static_cast<size_t>(t.numel()));
    std::iota(coords.begin(), coords.end(), 0);
    if (static_cast<int>(coords.size()) > max_coords_per_input) {
      for (size_t i = 0; i < coords.size(); ++i) {
        std::swap(coords[i], coords[static_cast<size_t>(rng.uniform_int(
                                 static_cast<int>(i), static_cast<int>(coords.size()) - 1))]);
      }
      coords.resize(static_cast<size_t>(max_coords_per_input));
    }
    for (int64_t c : coords) {
      const double orig = t.data()[c];
      t.data()[c] = orig + h;
      const double fp = eval();
      t.data()[c] = orig - h;
      const double fm = eval();
      t.data()[c] = orig;
      const double fd = (fp - fm) / (2.0 * h);
      const double ad = ad_grads[ti][static_cast<size_t>(c)];
      const double rel = std::abs(ad - fd) / std::max({1.0, std::abs(ad), std::abs(fd)});
      if (rel > result.max_rel_err) {
        result.max_rel_err = rel;
        result.worst_ad = ad;
        result.worst_fd = fd;
      }
    }
  }
  return result;
}

// O(n^2) k-nearest-neighbors reference.
inline std::vector<int> brute_knn(const std::vector<std::array<double, 3>>& ref,
                                  const std::array<double, 3>& q, int k) {
  std::vector<std::pair<double, int>> d;
  d.reserve(ref.size());
  for (size_t i = 0; i < ref.size(); ++i) {
    const double dx = ref[i][0] - q[0], dy = ref[i][1] - q[1], dz = ref[i][2] - q[2];
    d.emplace_back(dx * dx + dy * dy + dz * dz, static_cast<int>(i));
  }
  std::sort(d.begin(), d.end());
  std::vector<int> out;
  for (int i = 0; i < std::min<int>(k, static_cast<int>(d.size())); ++i) out.push_back(d[static_cast<size_t>(i)].second);
  return out;
}

// Exhaustive maximum-weight perfect matching for n <= 9.
inline std::pair<double, std::vector<int>> brute_assignment(
    const std::vector<double>& w, int n) {
  std::vector<int> perm(static_cast<size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  std::vector<int> best = perm;
  double best_w = -1e300;
  do {
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += w[static_cast<size_t>(i * n + perm[static_cast<size_t>(i)])];
    if (s > best_w) {
      best_w = s;
      best = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  return {best_w, best};
}

}  // namespace testsupport
