#pragma once

#include <cstdint>

#include "diablo/model.hpp"
#include "diablo/oracle.hpp"
#include "diablo/rng.hpp"

namespace diablo::oracle {

struct GradcheckOptions {
  double tolerance = 1e-4;
  double step = 1e-5;
  double reconstruction_tolerance = 1e-6;
  // Test hook: perturbs the analytic gradient of the first parameter before comparison.
  bool corrupt_backward = false;
};

/// Replaces every adapter's trainable tensors with N(0, gain²/fan_in) draws, so that zero-initialized
/// factors (LoRA B, DiaBlo blocks) do not hide gradient paths. fan_in is the second-to-last dim.
void randomize_adapters(Model<double>& model, Rng& rng, double gain = 1.0);

/// Analytic adapter gradients of L = ½‖model(x)‖² against central differences.
GradCheckReport check_model_gradients(Model<double>& model, const Tensor<double>& input,
                                      const GradcheckOptions& options = {});

/// For every adapted layer, the adapter path on random inputs against x·(dense update) computed
/// with the reference matmul. Reported errors are norm-wise relative.
GradCheckReport check_dense_reconstruction(Model<double>& model, Rng& rng, std::size_t batch,
                                           const GradcheckOptions& options = {});

}  // namespace diablo::oracle
