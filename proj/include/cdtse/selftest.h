#pragma once

#include <functional>
#include <string>
#include <vector>

namespace cdtse {

struct SelfTestCheck {
  std::string name;
  bool passed = false;
  std::string detail;  // measured value or failure reason
};

// Gradient checks for every op and model variant plus the core invariants
// (score ranges, collapse, SI-SDR oracle, conv oracles, checkpoint and
// simulator identities). `on_result` is called as each check finishes.
std::vector<SelfTestCheck> RunSelfTest(const std::function<void(const SelfTestCheck&)>& on_result = nullptr);

}  // namespace cdtse
