#include "pxnet/trigger2.hpp"

#include <algorithm>
#include <cmath>

#include "pxnet/util.hpp"

namespace pxnet::trigger2 {

double amplification_inv(double a) {
  require(a > 1.0, Err::PreconditionViolation, "amplification must be > 1 to invert");
  double lo = 1e-9, hi = 1e9;  // A is strictly decreasing: A(lo) huge, A(hi) ~ 1
  for (int i = 0; i < 200; ++i) {
    double mid = 0.5 * (lo + hi);
    if (amplification(mid) > a)
      lo = mid;
    else
      hi = mid;
  }
  return 0.5 * (lo + hi);
}

void model_jacobian(double t, const LensModelParams& p, double out[5]) {
  double tau = (t - p.t0) / p.tE;
  double u = std::sqrt(p.u0 * p.u0 + tau * tau);
  double a = amplification(u);
  double da = amplification_deriv(u);
  double fs = p.f_source;
  out[0] = fs * da * (p.u0 / u);
  out[1] = fs * da * (-tau / (p.tE * u));
  out[2] = fs * da * (-tau * tau / (p.tE * u));
  out[3] = a - 1.0;
  out[4] = 1.0;
}

namespace {

// Cholesky solve of the symmetric positive-definite 5x5 system a*x = b.
bool solve_spd5(const double a_in[25], const double b_in[5], double x[5]) {
  double l[25];
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j <= i; ++j) {
      double s = a_in[i * 5 + j];
      for (int k = 0; k < j; ++k) s -= l[i * 5 + k] * l[j * 5 + k];
      if (i == j) {
        if (!(s > 0) || !std::isfinite(s)) return false;
        l[i * 5 + i] = std::sqrt(s);
      } else {
        l[i * 5 + j] = s / l[j * 5 + j];
      }
    }
  double y[5];
  for (int i = 0; i < 5; ++i) {
    double s = b_in[i];
    for (int k = 0; k < i; ++k) s -= l[i * 5 + k] * y[k];
    y[i] = s / l[i * 5 + i];
  }
  for (int i = 4; i >= 0; --i) {
    double s = y[i];
    for (int k = i + 1; k < 5; ++k) s -= l[k * 5 + i] * x[k];
    x[i] = s / l[i * 5 + i];
  }
  return true;
}

// Full inverse via Cholesky; false when not positive definite.
bool invert_spd5(const double a_in[25], double inv[25]) {
  for (int col = 0; col < 5; ++col) {
    double e[5] = {0, 0, 0, 0, 0};
    e[col] = 1.0;
    double x[5];
    if (!solve_spd5(a_in, e, x)) return false;
    for (int row = 0; row < 5; ++row) inv[row * 5 + col] = x[row];
  }
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < i; ++j) {
      double s = 0.5 * (inv[i * 5 + j] + inv[j * 5 + i]);
      inv[i * 5 + j] = inv[j * 5 + i] = s;
    }
  return true;
}

struct Sample {
  double t, y, w;  // w = 1/sigma^2
};

double chi2_of(const std::vector<Sample>& s, const LensModelParams& p) {
  double c = 0;
  for (const Sample& q : s) {
    double r = q.y - model_flux(q.t, p);
    c += r * r * q.w;
  }
  return c;
}

void accumulate_normal(const std::vector<Sample>& s, const LensModelParams& p, double h[25],
                       double g[5]) {
  std::fill(h, h + 25, 0.0);
  std::fill(g, g + 5, 0.0);
  double j[5];
  for (const Sample& q : s) {
    model_jacobian(q.t, p, j);
    double r = q.y - model_flux(q.t, p);
    for (int a = 0; a < 5; ++a) {
      g[a] += q.w * r * j[a];
      for (int b = 0; b <= a; ++b) h[a * 5 + b] += q.w * j[a] * j[b];
    }
  }
  for (int a = 0; a < 5; ++a)
    for (int b = a + 1; b < 5; ++b) h[a * 5 + b] = h[b * 5 + a];
}

void project_bounds(LensModelParams& p, double span) {
  p.u0 = std::clamp(p.u0, 1e-3, 10.0);
  p.tE = std::clamp(p.tE, 0.01, 10.0 * std::max(span, 0.01));
  p.f_source = std::max(p.f_source, 0.0);
}

}  // namespace

FitResult lm_fit(const trigger1::LightCurve& curve, const LensModelParams& init,
                 const FitOptions& opt) {
  require(init.u0 > 0 && init.tE > 0 && init.f_source >= 0, Err::PreconditionViolation,
          "initial parameters violate model invariants");

  std::vector<Sample> samples;
  samples.reserve(curve.n());
  for (size_t i = 0; i < curve.n(); ++i) {
    if (!curve.valid[i]) continue;
    require(curve.error[i] > 0, Err::PreconditionViolation, "valid sample with error <= 0");
    double w = 1.0 / (curve.error[i] * curve.error[i]);
    samples.push_back({curve.epoch_time[i], curve.flux[i], w});
  }
  if (samples.size() < 6)
    raise(Err::InsufficientData, "fit needs >= 6 valid samples, has " +
                                     std::to_string(samples.size()));

  double span = samples.back().t - samples.front().t;

  FitResult out;
  out.dof = int(samples.size()) - 5;
  LensModelParams p = init;
  project_bounds(p, span);

  double chi2 = chi2_of(samples, p);
  double lambda = opt.lambda_init;
  bool converged = false;
  int iter = 0;

  double h[25], g[5];
  for (; iter < opt.max_iterations && !converged; ++iter) {
    accumulate_normal(samples, p, h, g);

    bool stepped = false;
    while (lambda <= opt.lambda_max) {
      double hd[25];
      std::copy(h, h + 25, hd);
      for (int d = 0; d < 5; ++d) hd[d * 5 + d] = h[d * 5 + d] * (1.0 + lambda);
      double step[5];
      if (!solve_spd5(hd, g, step)) {
        lambda *= 10.0;
        continue;
      }
      LensModelParams trial = p;
      trial.u0 += step[0];
      trial.t0 += step[1];
      trial.tE += step[2];
      trial.f_source += step[3];
      trial.f_base += step[4];
      project_bounds(trial, span);
      double trial_chi2 = chi2_of(samples, trial);
      if (std::isfinite(trial_chi2) && trial_chi2 <= chi2) {
        double norm = 0;
        for (double s : step) norm += s * s;
        norm = std::sqrt(norm);
        double rel_drop = (chi2 - trial_chi2) / std::max(chi2, 1e-300);
        p = trial;
        chi2 = trial_chi2;
        lambda = std::max(lambda / 10.0, 1e-18);
        stepped = true;
        if (rel_drop < opt.rel_chi2_tol || norm < opt.step_norm_tol || chi2 < 1e-18)
          converged = true;
        break;
      }
      lambda *= 10.0;
    }
    if (!stepped) break;  // normal matrix singular or damping exhausted
  }

  out.params = p;
  out.chi2 = chi2;
  out.iterations = iter;
  out.converged = converged;

  // Gauss-Newton covariance from the undamped normal matrix at the solution.
  accumulate_normal(samples, p, h, g);
  out.has_covariance = converged && invert_spd5(h, out.covariance);

  double sw = 0, swy = 0;
  for (const Sample& q : samples) {
    sw += q.w;
    swy += q.w * q.y;
  }
  double cmean = swy / sw;
  double chi2_const = 0;
  for (const Sample& q : samples) {
    double r = q.y - cmean;
    chi2_const += r * r * q.w;
  }
  out.delta_chi2_vs_constant = chi2_const - chi2;
  return out;
}

LensModelParams initial_guess(const trigger1::LightCurve& curve, const trigger1::Peak& peak) {
  require(peak.start_index >= 0 && size_t(peak.end_index) < curve.n() &&
              peak.start_index <= peak.apex_index && peak.apex_index <= peak.end_index,
          Err::PreconditionViolation, "peak does not fit the curve");

  std::vector<double> vals;
  vals.reserve(curve.n());
  for (size_t i = 0; i < curve.n(); ++i)
    if (curve.valid[i]) vals.push_back(curve.flux[i]);
  require(!vals.empty(), Err::PreconditionViolation, "curve has no valid samples");
  double baseline = median_inplace(vals);

  std::vector<double> gaps;
  for (size_t i = 1; i < curve.n(); ++i)
    gaps.push_back(curve.epoch_time[i] - curve.epoch_time[i - 1]);
  double spacing = gaps.empty() ? 1.0 : median(gaps);

  LensModelParams p;
  p.t0 = curve.epoch_time[peak.apex_index];
  p.f_base = baseline;
  double run_samples = double(peak.end_index - peak.start_index + 1);
  p.tE = std::max(0.5 * run_samples * spacing, 2.0 * spacing);
  double excess = std::max(curve.flux[peak.apex_index] - baseline, 1e-6);
  p.f_source = excess;
  p.u0 = std::clamp(amplification_inv(2.0), 0.05, 3.0);
  return p;
}

RuleResult chi2_test(const FitResult& fit, double max_reduced_chi2, double min_delta_chi2) {
  require(fit.dof >= 1, Err::PreconditionViolation, "chi2 test needs dof >= 1");
  RuleResult r;
  if (!fit.converged) r.reasons.push_back("convergence");
  if (!(fit.chi2 / fit.dof <= max_reduced_chi2)) r.reasons.push_back("chi2_cut");
  if (!(fit.delta_chi2_vs_constant >= min_delta_chi2)) r.reasons.push_back("delta_chi2_cut");
  r.pass = r.reasons.empty();
  return r;
}

ColorResult color_correlation(const trigger1::LightCurve& curve_r,
                              const trigger1::LightCurve& curve_b, double threshold) {
  size_t n = std::min(curve_r.n(), curve_b.n());
  std::vector<double> rv, bv;
  for (size_t i = 0; i < n; ++i)
    if (curve_r.valid[i] && curve_b.valid[i]) {
      require(curve_r.epoch_time[i] == curve_b.epoch_time[i], Err::PreconditionViolation,
              "band curves do not share the epoch grid");
      rv.push_back(curve_r.flux[i]);
      bv.push_back(curve_b.flux[i]);
    }
  if (rv.size() < 6)
    raise(Err::InsufficientOverlap, "bands share " + std::to_string(rv.size()) +
                                        " valid samples, need 6");

  auto base_of = [](const trigger1::LightCurve& c) {
    std::vector<double> v;
    for (size_t i = 0; i < c.n(); ++i)
      if (c.valid[i]) v.push_back(c.flux[i]);
    return median_inplace(v);
  };
  double rb = base_of(curve_r), bb = base_of(curve_b);

  double sxx = 0, syy = 0, sxy = 0, sx = 0, sy = 0;
  double dn = double(rv.size());
  for (size_t i = 0; i < rv.size(); ++i) {
    double x = rv[i] - rb, y = bv[i] - bb;
    sx += x;
    sy += y;
    sxx += x * x;
    syy += y * y;
    sxy += x * y;
  }
  double vx = sxx - sx * sx / dn, vy = syy - sy * sy / dn;
  ColorResult out;
  out.n_common = int(rv.size());
  out.correlation = (vx > 0 && vy > 0) ? (sxy - sx * sy / dn) / std::sqrt(vx * vy) : 0.0;
  out.pass = out.correlation >= threshold;
  return out;
}

EventDecision decide_event(const FitResult& fit, const ColorResult* color,
                           const DecisionConfig& cfg) {
  EventDecision d;
  RuleResult chi = chi2_test(fit, cfg.max_reduced_chi2, cfg.min_delta_chi2);
  d.reasons = chi.reasons;
  if (color && !color->pass) d.reasons.push_back("achromaticity");
  d.accepted = d.reasons.empty();
  return d;
}

}  // namespace pxnet::trigger2
