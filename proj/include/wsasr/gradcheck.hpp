// wsasr: central finite-difference verification of analytic gradients.
// Runs in double precision only; stochastic graphs (active dropout) are
// rejected because the loss would not be a deterministic function.
#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "wsasr/autograd.hpp"
#include "wsasr/common.hpp"
#include "wsasr/optim.hpp"

namespace wsasr {

struct GradCheckReport {
  double max_rel_err = 0;
  std::string worst_param;
  int64_t worst_index = -1;
  int64_t coords_checked = 0;
};

// `build` constructs the scalar loss on the given tape from leaf values for
// each parameter (keyed by name). The same builder is re-run for numeric
// evaluations, so it must be deterministic.
using LossBuilder =
    std::function<Value<double>(Tape<double>&, const std::map<std::string, Value<double>>&)>;

inline double eval_loss(const NamedTensors<double>& params, const LossBuilder& build) {
  Tape<double> tape;
  tape.grad_enabled = false;
  std::map<std::string, Value<double>> leaves;
  for (const auto& [name, t] : params) leaves[name] = tape.leaf(t, "param");
  Value<double> loss = build(tape, leaves);
  require(tape.val(loss).numel() == 1, "finite_diff_check: loss must be scalar");
  return tape.val(loss).data[0];
}

// Returns max over sampled coordinates of
//   |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
inline GradCheckReport finite_diff_check(const NamedTensors<double>& params,
                                         const LossBuilder& build, double eps = 1e-5,
                                         int64_t max_coords_per_param = 64,
                                         uint64_t seed = 17) {
  NamedTensors<double> analytic;
  {
    Tape<double> tape;
    std::map<std::string, Value<double>> leaves;
    for (const auto& [name, t] : params) leaves[name] = tape.leaf(t, "param");
    Value<double> loss = build(tape, leaves);
    require(tape.val(loss).numel() == 1, "finite_diff_check: loss must be scalar");
    require(!tape.used_dropout(),
            "finite_diff_check: graph is stochastic (active dropout); check rejected");
    tape.backward(loss);
    for (const auto& [name, t] : params) analytic[name] = tape.grad(leaves[name]);
  }

  GradCheckReport rep;
  Rng rng(seed);
  NamedTensors<double> work = params;
  for (auto& [name, t] : work) {
    int64_t n = t.numel();
    std::vector<int64_t> coords;
    if (n <= max_coords_per_param) {
      for (int64_t i = 0; i < n; ++i) coords.push_back(i);
    } else {
      for (int64_t i = 0; i < max_coords_per_param; ++i) coords.push_back(rng.uniform_int(n));
    }
    for (int64_t c : coords) {
      double orig = t.data[size_t(c)];
      t.data[size_t(c)] = orig + eps;
      double fp = eval_loss(work, build);
      t.data[size_t(c)] = orig - eps;
      double fm = eval_loss(work, build);
      t.data[size_t(c)] = orig;
      double numeric = (fp - fm) / (2 * eps);
      double a = analytic[name].data[size_t(c)];
      double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-8});
      double rel = std::fabs(a - numeric) / denom;
      ++rep.coords_checked;
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst_param = name;
        rep.worst_index = c;
      }
    }
  }
  return rep;
}

}  // namespace wsasr
