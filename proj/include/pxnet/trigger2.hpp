#pragma once
#include <cmath>
#include <string>
#include <vector>

#include "pxnet/trigger1.hpp"

namespace pxnet::trigger2 {

// Point-source point-lens light curve:
//   F(t) = f_base + f_source * (A(u(t)) - 1)
//   u(t) = sqrt(u0^2 + ((t - t0)/tE)^2)
//   A(u) = (u^2 + 2) / (u * sqrt(u^2 + 4))
struct LensModelParams {
  double u0 = 0.5;
  double t0 = 0.0;
  double tE = 1.0;
  double f_source = 0.0;
  double f_base = 0.0;
};

inline double amplification(double u) {
  double u2 = u * u;
  return (u2 + 2.0) / (u * std::sqrt(u2 + 4.0));
}

inline double amplification_deriv(double u) {  // dA/du
  double u2 = u * u;
  return -8.0 / (u2 * std::pow(u2 + 4.0, 1.5));
}

double amplification_inv(double a);  // u with A(u) = a, a > 1

inline double model_flux(double t, const LensModelParams& p) {
  double tau = (t - p.t0) / p.tE;
  double u = std::sqrt(p.u0 * p.u0 + tau * tau);
  return p.f_base + p.f_source * (amplification(u) - 1.0);
}

// dF/d{u0, t0, tE, f_source, f_base}, analytic
void model_jacobian(double t, const LensModelParams& p, double out[5]);

struct FitResult {
  LensModelParams params{};
  double chi2 = 0.0;
  int dof = 0;
  double covariance[25] = {0};  // row-major 5x5, valid iff has_covariance
  bool has_covariance = false;
  int iterations = 0;
  bool converged = false;
  double delta_chi2_vs_constant = 0.0;
};

struct FitOptions {
  int max_iterations = 200;
  double lambda_init = 1e-3;
  double lambda_max = 1e12;
  double rel_chi2_tol = 1e-10;
  double step_norm_tol = 1e-8;
};

// Levenberg-Marquardt on valid samples; needs >= 6 of them (dof >= 1).
// A singular normal matrix is reported as unconverged with no covariance.
FitResult lm_fit(const trigger1::LightCurve& curve, const LensModelParams& init,
                 const FitOptions& opt = {});

LensModelParams initial_guess(const trigger1::LightCurve& curve, const trigger1::Peak& peak);

struct RuleResult {
  bool pass = false;
  std::vector<std::string> reasons;  // failed rules: convergence, chi2_cut, delta_chi2_cut
};
RuleResult chi2_test(const FitResult& fit, double max_reduced_chi2, double min_delta_chi2);

struct ColorResult {
  double correlation = 0.0;
  bool pass = false;
  int n_common = 0;
};
// Pearson correlation of baseline-subtracted fluxes over common valid samples
ColorResult color_correlation(const trigger1::LightCurve& curve_r,
                              const trigger1::LightCurve& curve_b, double threshold = 0.7);

struct DecisionConfig {
  double max_reduced_chi2 = 2.0;
  double min_delta_chi2 = 25.0;
  double color_threshold = 0.7;
};

struct EventDecision {
  bool accepted = false;
  std::vector<std::string> reasons;  // every failed rule, in rule order
};
// color == nullptr skips the achromaticity rule (single-band runs)
EventDecision decide_event(const FitResult& fit, const ColorResult* color,
                           const DecisionConfig& cfg);

}  // namespace pxnet::trigger2
