#pragma once

#include <initializer_list>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "jmvar/error.hpp"

namespace jmvar {

/// Rejects keys of `j` outside `allowed`, naming every offender.
inline void check_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed, const std::string& prefix = "") {
  std::vector<std::string> unknown;
  for (const auto& item : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || item.key() == a;
    if (!ok) unknown.push_back(prefix + item.key());
  }
  if (unknown.empty()) return;
  std::string msg = "unknown field";
  msg += unknown.size() > 1 ? "s " : " ";
  for (std::size_t i = 0; i < unknown.size(); ++i) msg += (i ? ", " : "") + unknown[i];
  throw Error(ErrorCode::Config, msg, unknown);
}

}  // namespace jmvar
