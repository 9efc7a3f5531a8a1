// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <string>

#include "bsr/autodiff.hpp"

namespace bsr::ad {

/// Loss as a pure function of the parameter values.
using LossClosure = std::function<double(const ParamStore&)>;

struct FiniteDiffReport {
  /// Max over trainable parameter tensors of ||g_ad - g_fd|| / max(||g_fd||, 1e-8).
  double max_relative_error = 0.0;
  std::string worst_parameter;
  std::size_t scalars_checked = 0;
  std::size_t tensors_checked = 0;
};

/// Central differences for every trainable scalar, compared per parameter
/// tensor against `analytic`. Raises DeterminismError if two evaluations at
/// the same point differ, and ContractError if `analytic` carries an entry
/// for a frozen parameter or `step` lies outside [1e-7, 1e-3].
FiniteDiffReport finite_diff_check(const LossClosure& loss, ParamStore& params, const GradTable& analytic,
                                   double step = 1e-5);

}  // namespace bsr::ad
