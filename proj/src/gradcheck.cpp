#include "diablo/gradcheck.hpp"

#include <cmath>
#include <variant>

#include "diablo/adapters.hpp"
#include "diablo/ops.hpp"

namespace diablo::oracle {

namespace {

double half_sum_squares(Model<double>& model, const Tensor<double>& input) {
  const auto y = model.forward(input);
  double acc = 0.0;
  for (double v : y.data()) acc += v * v;
  return 0.5 * acc;
}

Tensor<double> lora_dense_reference(const LoRAAdapter<double>& ad) {
  auto dense = reference_matmul(ad.a, ad.b);
  for (auto& v : dense.data()) v *= ad.scaling;
  return dense;
}

}  // namespace

void randomize_adapters(Model<double>& model, Rng& rng, double gain) {
  for (auto& param : model.parameters()) {
    const auto& shape = param.value->shape();
    const double fan_in = shape.size() >= 2 ? static_cast<double>(shape[shape.size() - 2]) : 1.0;
    const double stddev = gain / std::sqrt(fan_in);
    for (auto& v : param.value->data()) v = stddev * rng.normal();
  }
}

GradCheckReport check_model_gradients(Model<double>& model, const Tensor<double>& input,
                                      const GradcheckOptions& options) {
  GradCheckReport report;
  report.tolerance = options.tolerance;

  model.zero_grad();
  const auto y = model.forward(input);
  model.backward(y);  // dL/dy = y for L = ½‖y‖²

  bool first = true;
  for (auto& param : model.parameters()) {
    std::vector<double> analytic(param.grad->data().begin(), param.grad->data().end());
    if (first && options.corrupt_backward && !analytic.empty()) analytic[0] += 1.0 + std::abs(analytic[0]);
    first = false;
    const auto numeric =
        finite_diff_grad([&] { return half_sum_squares(model, input); }, param.value->data(), options.step);
    auto part = compare_gradients(param.name, analytic, numeric, options.tolerance);
    report.merge(part);
  }
  return report;
}

GradCheckReport check_dense_reconstruction(Model<double>& model, Rng& rng, std::size_t batch,
                                           const GradcheckOptions& options) {
  GradCheckReport report;
  report.tolerance = options.reconstruction_tolerance;
  for (auto* layer : model.linears()) {
    if (!layer->has_adapter()) continue;
    const auto x = rand_normal<double>(rng, {batch, layer->in_features()});
    Tensor<double> actual, dense;
    if (const auto* bd = std::get_if<BlockDiagonalAdapter<double>>(&layer->adapter())) {
      actual = diablo_delta(x, *bd);
      dense = dense_blockdiag(*bd);
    } else {
      const auto& lora = std::get<LoRAAdapter<double>>(layer->adapter());
      actual = lora_delta(x, lora);
      dense = lora_dense_reference(lora);
    }
    const auto expected = reference_matmul(x, dense);
    const double err = normwise_relative_error(actual, expected);
    report.checked += actual.size();
    if (!(err <= report.tolerance) && !report.failing_parameter) report.failing_parameter = layer->name();
    report.max_relative_error = std::max(report.max_relative_error, std::isnan(err) ? INFINITY : err);
  }
  return report;
}

}  // namespace diablo::oracle
