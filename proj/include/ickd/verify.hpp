#pragma once

// The oracle suite behind `ickd verify` and the first acceptance criteria.

#include <cstdint>
#include <string>
#include <vector>

namespace ickd {

struct CheckResult {
  std::string group;
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

// icc_matrix vs the naive oracle on random tensors, all kernel kinds, 64-bit.
std::vector<CheckResult> verify_icc_oracle(std::uint64_t seed, int cases = 200);
// loss_kd vs the naive oracle, plus the two-class closed form.
std::vector<CheckResult> verify_kl_oracle(std::uint64_t seed, int cases = 200);
// Finite-difference check of every registered primitive and composite loss.
std::vector<CheckResult> verify_gradients(std::uint64_t seed, double tolerance = 1e-4);
// ICC symmetry, PSD, permutation properties, grid identities, scaling law.
std::vector<CheckResult> verify_structure(std::uint64_t seed);

std::vector<CheckResult> verify_all(std::uint64_t seed);

// "PASS group/name detail" or "FAIL ...".
std::string format_check(const CheckResult& check);

}  // namespace ickd
