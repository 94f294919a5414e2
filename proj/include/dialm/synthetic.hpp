#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dialm/corpus.hpp"

namespace dialm {

struct SynthConfig {
  /// Subset of {"restaurant", "hotel", "taxi", "train"}; empty means all.
  std::vector<std::string> domains;
  double multi_domain_prob = 0.3;
  double out_of_scope_prob = 0.15;
  double system_greeting_prob = 0.5;
  double booking_prob = 0.7;
};

/// Label used for out-of-scope user requests.
inline constexpr const char* kOutOfScopeIntent = "oos";

/// Templated task-oriented dialogues with intent, belief-state and act
/// annotations. Speakers always alternate. Deterministic per seed.
std::vector<Dialogue> generate_synthetic(std::uint64_t seed, std::size_t n_dialogues,
                                         const SynthConfig& config = {});

}  // namespace dialm
