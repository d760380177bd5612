#include "rfl/gradcheck.hpp"

#include <cmath>

namespace rfl {

double finite_diff_check(
    const std::function<Tensor(const std::vector<Tensor>&)>& f,
    std::vector<Tensor> xs, double h) {
  std::vector<Tensor> vars;
  vars.reserve(xs.size());
  for (const Tensor& x : xs) vars.push_back(x.detach().set_requires_grad(true));

  std::vector<std::vector<double>> analytic;
  {
    GradTape tape;
    Tensor y = f(vars);
    tape.backward(y);
    for (Tensor& v : vars) analytic.push_back(v.grad());
  }

  double worst = 0.0;
  NoGradGuard ng;
  for (size_t vi = 0; vi < vars.size(); ++vi) {
    auto& vals = vars[vi].data();
    for (size_t i = 0; i < vals.size(); ++i) {
      const double keep = vals[i];
      vals[i] = keep + h;
      const double fp = f(vars).value();
      vals[i] = keep - h;
      const double fm = f(vars).value();
      vals[i] = keep;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[vi][i];
      const double err = std::abs(a - numeric) / (std::abs(a) + 1e-8);
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace rfl
