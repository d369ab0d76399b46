#include "cdmm/gaussian.hpp"

#include <cmath>
#include <numbers>

#include "cdmm/error.hpp"

namespace cdmm {

namespace {
const double kHalfLog2Pi = 0.5 * std::log(2.0 * std::numbers::pi);
}

void DiagGaussian::validate() const {
  if (!mean.same_shape(scale)) throw DimensionError("Gaussian mean and scale shapes differ");
  for (double s : scale.values()) {
    if (!(s > 0.0)) throw ContractError("Gaussian scale must be strictly positive");
  }
}

double diag_gaussian_log_pdf(std::span<const double> x, std::span<const double> mean,
                             std::span<const double> scale) {
  if (x.size() != mean.size() || x.size() != scale.size()) {
    throw DimensionError("log-pdf operands differ in length");
  }
  double lp = 0.0;
  for (std::size_t d = 0; d < x.size(); ++d) {
    const double u = (x[d] - mean[d]) / scale[d];
    lp += -kHalfLog2Pi - std::log(scale[d]) - 0.5 * u * u;
  }
  return lp;
}

double kl_step(const DiagGaussian& q, const DiagGaussian& p) {
  if (q.mean.numel() != p.mean.numel()) throw DimensionError("kl_step: dimensions differ");
  q.validate();
  p.validate();
  double kl = 0.0;
  for (std::size_t d = 0; d < q.mean.numel(); ++d) {
    const double qs = q.scale[d], ps = p.scale[d], dm = q.mean[d] - p.mean[d];
    kl += std::log(ps / qs) + (qs * qs + dm * dm) / (2.0 * ps * ps) - 0.5;
  }
  return kl;
}

ad::Var diag_gaussian_log_pdf(ad::Var x, ad::Var mean, ad::Var scale) {
  const double n = static_cast<double>(x.value().numel());
  ad::Var log_s = ad::log(scale);
  ad::Var inv_var = ad::exp(ad::scale(log_s, -2.0));
  ad::Var quad = ad::sum(ad::mul(ad::square(ad::sub(x, mean)), inv_var));
  // Σ log s over every entry; a one-element scale counts once per entry.
  ad::Var log_det = scale.value().numel() == 1 ? ad::scale(ad::sum(log_s), n) : ad::sum(log_s);
  return ad::add_scalar(ad::neg(ad::add(log_det, ad::scale(quad, 0.5))), -kHalfLog2Pi * n);
}

ad::Var kl_diag(const GaussianVar& q, const GaussianVar& p) {
  if (q.mean.value().numel() != p.mean.value().numel()) throw DimensionError("kl_diag: dimensions differ");
  const double n = static_cast<double>(q.mean.value().numel());
  ad::Var log_ratio = ad::sub(ad::log(p.scale), ad::log(q.scale));
  ad::Var num = ad::add(ad::square(q.scale), ad::square(ad::sub(q.mean, p.mean)));
  ad::Var inv = ad::exp(ad::scale(ad::log(p.scale), -2.0));
  ad::Var terms = ad::add(log_ratio, ad::scale(ad::mul(num, inv), 0.5));
  return ad::add_scalar(ad::sum(terms), -0.5 * n);
}

ad::Var kl_standard_normal(const GaussianVar& q) {
  const double n = static_cast<double>(q.mean.value().numel());
  ad::Var num = ad::add(ad::square(q.scale), ad::square(q.mean));
  ad::Var terms = ad::sub(ad::scale(num, 0.5), ad::log(q.scale));
  return ad::add_scalar(ad::sum(terms), -0.5 * n);
}

}  // namespace cdmm
