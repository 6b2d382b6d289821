#include "coperc/autodiff/grad_policy.hpp"

#include <algorithm>
#include <charconv>
#include <stdexcept>

namespace coperc {

GradPolicy GradPolicy::limited(int n_grad) {
  if (n_grad < 1) throw std::invalid_argument("n_grad must be a positive integer or 'all'");
  return GradPolicy(n_grad);
}

GradPolicy GradPolicy::parse(std::string_view text) {
  if (text == "all") return all();
  int n = 0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), n);
  if (ec != std::errc() || ptr != text.data() + text.size()) {
    throw std::invalid_argument("invalid n_grad '" + std::string(text) + "': expected 'all' or a positive integer");
  }
  return limited(n);
}

std::string GradPolicy::to_string() const { return n_grad_ ? std::to_string(*n_grad_) : "all"; }

std::vector<CavId> GradPolicy::select(CavId ego, std::span<const AgentDistance> others) const {
  std::vector<AgentDistance> order(others.begin(), others.end());
  std::sort(order.begin(), order.end(), [](const AgentDistance& a, const AgentDistance& b) {
    return a.distance != b.distance ? a.distance < b.distance : a.id < b.id;
  });
  std::vector<CavId> out{ego};
  const std::size_t cap = n_grad_ ? static_cast<std::size_t>(*n_grad_) : order.size() + 1;
  for (const auto& a : order) {
    if (out.size() >= cap) break;
    if (a.id != ego) out.push_back(a.id);
  }
  return out;
}

}  // namespace coperc
