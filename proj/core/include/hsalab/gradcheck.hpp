#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "hsalab/rng.hpp"
#include "hsalab/tensor.hpp"

namespace hsalab {

// Finite-difference gradient checking. Always runs at 64-bit: central
// differences are unusable in float. The routine f must be a deterministic
// scalar function of the registered parameter tensors; determinism is
// enforced by evaluating f twice up front.

struct GradCheckParam {
  std::string name;
  Tensor<double>* value = nullptr;          // perturbed in place, restored after
  const Tensor<double>* analytic = nullptr; // analytic gradient, same shape
};

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0.0;
  std::size_t worst_index = 0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
  std::size_t checked = 0;
  bool pass = true;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_err = 0.0;
  bool pass = true;

  const GradCheckEntry* worst() const {
    const GradCheckEntry* w = nullptr;
    for (const auto& e : entries)
      if (w == nullptr || e.max_rel_err > w->max_rel_err) w = &e;
    return w;
  }
};

struct GradCheckOptions {
  double eps = 1e-5;
  double tol = 1e-4;
  // Central differences carry irreducible round-off of about
  // |f| * ulp / (2*eps) (observed up to ~2e-10 here), so entries are compared as
  // |a - n| / max(|a|, |n|, denom_floor): gradient entries below the floor
  // only have to agree to absolute FD noise.
  double denom_floor = 1e-5;
  // 0 checks every entry. Otherwise a deterministic subsample of this many
  // entries per parameter (uniform without replacement, seeded below).
  std::size_t max_entries_per_param = 0;
  std::uint64_t sample_seed = 0x9dc0ffeeULL;
};

inline double relative_error(double a, double b) {
  const double denom = std::max({std::fabs(a), std::fabs(b), 1e-8});
  return std::fabs(a - b) / denom;
}

inline GradCheckReport gradcheck(const std::function<double()>& f,
                                 const std::vector<GradCheckParam>& params,
                                 const GradCheckOptions& opts = {}) {
  const double base0 = f();
  const double base1 = f();
  if (!(base0 == base1)) {
    throw ContractError("gradcheck: routine is not deterministic (two evaluations differ)");
  }

  GradCheckReport report;
  Rng sampler(opts.sample_seed);

  for (const auto& p : params) {
    HSALAB_CHECK(p.value != nullptr && p.analytic != nullptr, "gradcheck: null parameter");
    HSALAB_CHECK(p.value->size() == p.analytic->size(), "gradcheck: gradient shape mismatch");

    GradCheckEntry entry;
    entry.name = p.name;

    const std::size_t total = p.value->size();
    std::vector<std::size_t> picks;
    if (opts.max_entries_per_param == 0 || total <= opts.max_entries_per_param) {
      picks.resize(total);
      for (std::size_t i = 0; i < total; ++i) picks[i] = i;
    } else {
      // Floyd's sampling keeps the subset deterministic and duplicate-free.
      std::vector<bool> taken(total, false);
      for (std::size_t i = total - opts.max_entries_per_param; i < total; ++i) {
        std::size_t j = static_cast<std::size_t>(sampler.uniform_int(i + 1));
        if (taken[j]) j = i;
        taken[j] = true;
        picks.push_back(j);
      }
    }

    for (std::size_t idx : picks) {
      double& theta = (*p.value)[idx];
      const double saved = theta;
      theta = saved + opts.eps;
      const double fp = f();
      theta = saved - opts.eps;
      const double fm = f();
      theta = saved;
      const double numeric = (fp - fm) / (2.0 * opts.eps);
      const double analytic = (*p.analytic)[idx];
      const double denom = std::max({std::fabs(analytic), std::fabs(numeric), opts.denom_floor});
      const double rel = std::fabs(analytic - numeric) / denom;
      if (rel > entry.max_rel_err) {
        entry.max_rel_err = rel;
        entry.worst_index = idx;
        entry.analytic_at_worst = analytic;
        entry.numeric_at_worst = numeric;
      }
      ++entry.checked;
    }
    entry.pass = entry.max_rel_err <= opts.tol;
    report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
    report.pass = report.pass && entry.pass;
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace hsalab
