#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "mmctl/error.hpp"

namespace mmctl {

// One scalar input of a grad check: how to read/write it plus the analytic
// derivative claimed for it.
struct GradProbe {
  std::string label;
  std::function<double()> get;
  std::function<void(double)> set;
  double analytic = 0.0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst;
  std::size_t checked = 0;
};

// Central differences (f(x+eps) - f(x-eps)) / (2 eps) against each probe's
// analytic value. Relative error is |a - n| / max(|a|, |n|, abs_floor); the
// floor keeps vanishing gradients from reporting roundoff as huge ratios.
inline GradCheckReport grad_check(const std::function<double()>& f, std::vector<GradProbe>& probes,
                                  double eps, double abs_floor = 1e-6) {
  GradCheckReport report;
  for (auto& p : probes) {
    const double x0 = p.get();
    const double xp = x0 + eps, xm = x0 - eps;
    if (!std::isfinite(xp) || !std::isfinite(xm)) throw NumericError("grad_check: non-finite perturbation");
    p.set(xp);
    const double fp = f();
    p.set(xm);
    const double fm = f();
    p.set(x0);
    if (!std::isfinite(fp) || !std::isfinite(fm)) throw NumericError("grad_check: non-finite function value");
    const double numeric = (fp - fm) / (2.0 * eps);
    const double denom = std::max({std::abs(p.analytic), std::abs(numeric), abs_floor});
    const double rel = std::abs(p.analytic - numeric) / denom;
    if (report.checked == 0 || rel > report.max_rel_error) {
      report.max_rel_error = rel;
      report.worst = p.label;
    }
    ++report.checked;
  }
  return report;
}

// Convenience form over a flat vector of inputs.
inline GradCheckReport grad_check(const std::function<double(const std::vector<double>&)>& f,
                                  std::vector<double> x, const std::vector<double>& analytic, double eps,
                                  double abs_floor = 1e-6) {
  if (x.size() != analytic.size()) throw ShapeError("grad_check: analytic gradient length differs");
  std::vector<GradProbe> probes;
  for (std::size_t i = 0; i < x.size(); ++i) {
    probes.push_back({"x[" + std::to_string(i) + "]", [&x, i] { return x[i]; },
                      [&x, i](double v) { x[i] = v; }, analytic[i]});
  }
  return grad_check([&] { return f(x); }, probes, eps, abs_floor);
}

}  // namespace mmctl
