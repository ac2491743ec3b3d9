#include "satrack/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "satrack/errors.hpp"

namespace satrack {

namespace {

double eval_scalar(const std::function<Tensor()>& f) {
    TapeSuspend no_tape;
    double v = f().item();
    if (!std::isfinite(v)) {
        throw InputError("grad_check: function value is not finite");
    }
    return v;
}

} // namespace

double grad_check(const std::function<Tensor()>& f,
                  const std::vector<Tensor>& params, double eps) {
    if (!(eps > 0.0 && eps <= 1e-3)) {
        throw InputError("grad_check eps must lie in (0, 1e-3]");
    }

    for (const Tensor& p : params) p.node()->grad.clear();
    {
        Tape tape;
        Tensor loss = f();
        if (!std::isfinite(loss.item())) {
            throw InputError("grad_check: function value is not finite");
        }
        tape.backward(loss);
    }

    double max_rel = 0.0;
    for (const Tensor& p : params) {
        std::vector<double>& data = p.node()->data;
        const std::vector<double>& grad = p.node()->grad;
        for (size_t i = 0; i < data.size(); ++i) {
            double saved = data[i];
            data[i] = saved + eps;
            double up = eval_scalar(f);
            data[i] = saved - eps;
            double down = eval_scalar(f);
            data[i] = saved;
            double numeric = (up - down) / (2.0 * eps);
            double analytic = grad.empty() ? 0.0 : grad[i];
            double denom =
                std::max({std::fabs(analytic), std::fabs(numeric), 1e-8});
            max_rel = std::max(max_rel, std::fabs(analytic - numeric) / denom);
        }
    }
    return max_rel;
}

} // namespace satrack
