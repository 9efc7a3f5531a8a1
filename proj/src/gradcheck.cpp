// SPDX-License-Identifier: Apache-2.0
#include "bsr/gradcheck.hpp"

#include <algorithm>
#include <bit>
#include <cmath>

#include "bsr/errors.hpp"

namespace bsr::ad {

FiniteDiffReport finite_diff_check(const LossClosure& loss, ParamStore& params, const GradTable& analytic,
                                   double step) {
  if (!(step >= 1e-7 && step <= 1e-3)) {
    throw ContractError("finite difference step must lie in [1e-7, 1e-3]");
  }
  for (const auto& [id, g] : analytic.params) {
    if (!params.at(id).trainable) {
      throw ContractError("gradient present for frozen parameter " + params.at(id).name);
    }
  }
  const double base = loss(params);
  const double again = loss(params);
  if (std::bit_cast<std::uint64_t>(base) != std::bit_cast<std::uint64_t>(again)) {
    throw DeterminismError("loss closure returned different values for identical parameters");
  }

  FiniteDiffReport report;
  for (ParamId id = 0; static_cast<std::size_t>(id) < params.size(); ++id) {
    if (!params.at(id).trainable) {
      continue;
    }
    Tensor& value = params.at(id).value;
    Tensor numeric(value.shape());
    for (std::size_t i = 0; i < value.numel(); ++i) {
      const double saved = value[i];
      value[i] = saved + step;
      const double plus = loss(params);
      value[i] = saved - step;
      const double minus = loss(params);
      value[i] = saved;
      numeric[i] = (plus - minus) / (2.0 * step);
    }
    const Tensor* ad = analytic.param(id);
    double diff = 0.0;
    for (std::size_t i = 0; i < numeric.numel(); ++i) {
      const double a = ad != nullptr ? (*ad)[i] : 0.0;
      diff += (a - numeric[i]) * (a - numeric[i]);
    }
    const double rel = std::sqrt(diff) / std::max(dense::l2_norm(numeric), 1e-8);
    if (report.worst_parameter.empty() || rel > report.max_relative_error) {
      report.max_relative_error = rel;
      report.worst_parameter = params.at(id).name;
    }
    report.scalars_checked += value.numel();
    ++report.tensors_checked;
  }
  return report;
}

}  // namespace bsr::ad
