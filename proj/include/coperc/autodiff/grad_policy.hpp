#pragma once

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "coperc/ids.hpp"

namespace coperc {

struct AgentDistance {
  CavId id;
  double distance;
};

/// Which agents run their encoders with gradient tracking.
///
/// `all` tracks every agent; an integer N tracks the ego plus the N-1 nearest
/// cooperators (ties broken by lower id).
class GradPolicy {
 public:
  static GradPolicy all() { return GradPolicy(std::nullopt); }
  static GradPolicy limited(int n_grad);
  /// Accepts "all" or a positive integer.
  static GradPolicy parse(std::string_view text);

  bool is_all() const noexcept { return !n_grad_.has_value(); }
  std::optional<int> n_grad() const noexcept { return n_grad_; }
  std::string to_string() const;

  /// Returns tracked ids, ego first, then by ascending (distance, id).
  std::vector<CavId> select(CavId ego, std::span<const AgentDistance> others) const;

  bool operator==(const GradPolicy&) const = default;

 private:
  explicit GradPolicy(std::optional<int> n) : n_grad_(n) {}
  std::optional<int> n_grad_;
};

}  // namespace coperc
