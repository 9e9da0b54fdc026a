#pragma once

// Oracle suites shared by the `selftest` command and the acceptance runner.
// Every oracle here is computed independently of the code it checks
// (finite differences, brute-force loops, hand-composited values).

#include <filesystem>
#include <string>
#include <vector>

namespace sat {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

// Per-op finite-difference checks (rel err < 1e-3, 1e-2 for kinked ops) and
// splat_render on seeded scenes of 1, 4 and 8 Gaussians (< 2e-2).
CheckResult check_gradients();
// Identity fixed point, single-bone rotation, half/half translation blend.
CheckResult check_lbs_oracles();
// Chamfer / NC / f-score vs all-pairs loops on <= 50 points; PSNR/SSIM trivial cases.
CheckResult check_metric_oracles();
// Single- and two-splat centre pixels vs hand compositing (1e-2).
CheckResult check_splat_compositing();
// Frozen parameters, sampler frequency, graph-free augmentation, file
// round trips and toy-pipeline determinism. Writes under `scratch`.
CheckResult check_structural(const std::filesystem::path& scratch);

std::vector<CheckResult> run_selftest(const std::filesystem::path& scratch);

}  // namespace sat
