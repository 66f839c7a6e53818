#pragma once

// Default text assets (prompt templates, word lists, hint groups, few-shot
// exemplars), embedded at build time from templates/ and assets/.

#include <optional>
#include <string>
#include <string_view>

#include "ster/detail/embedded_assets.hpp"
#include "ster/error.hpp"

namespace ster::assets {

inline std::optional<std::string_view> find(const std::string& name) {
  const auto& table = generated::table();
  const auto it = table.find(name);
  if (it == table.end()) return std::nullopt;
  return it->second;
}

inline std::string_view get(const std::string& name) {
  const auto v = find(name);
  if (!v) throw Error("no embedded asset named " + name);
  return *v;
}

}  // namespace ster::assets
