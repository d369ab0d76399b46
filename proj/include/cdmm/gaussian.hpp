#pragma once

#include <span>

#include "cdmm/autodiff.hpp"
#include "cdmm/tensor.hpp"

namespace cdmm {

// Diagonal Gaussian with mean and standard deviation (scale) vectors.
struct DiagGaussian {
  Tensor mean;
  Tensor scale;

  void validate() const;
};

// Graph-level counterpart; mean and scale are equally shaped, one row per distribution.
struct GaussianVar {
  ad::Var mean;
  ad::Var scale;

  DiagGaussian value() const { return {mean.value(), scale.value()}; }
};

// Σ_d [−½log(2π) − log s_d − ½((x_d − m_d)/s_d)²]
double diag_gaussian_log_pdf(std::span<const double> x, std::span<const double> mean,
                             std::span<const double> scale);

// KL(q ‖ p) between diagonal Gaussians, summed over dimensions.
double kl_step(const DiagGaussian& q, const DiagGaussian& p);

// Elementwise log-density summed over every entry. `scale` may be one element.
ad::Var diag_gaussian_log_pdf(ad::Var x, ad::Var mean, ad::Var scale);
// KL summed over every entry (all rows).
ad::Var kl_diag(const GaussianVar& q, const GaussianVar& p);
// KL against N(0, I) for every row of q.
ad::Var kl_standard_normal(const GaussianVar& q);

}  // namespace cdmm
