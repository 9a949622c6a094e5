#pragma once

#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sml/io.hpp"

#ifndef SML_BUILD_ID
#define SML_BUILD_ID "unversioned"
#endif

namespace sml::cli {

inline std::string utc_now_iso8601() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// One manifest per run, written next to the run's outputs.
struct RunManifest {
  std::string command;
  std::vector<std::string> args;
  std::vector<std::string> config_paths;
  std::uint64_t seed = 0;
  std::string build_id = SML_BUILD_ID;
  std::string started_at = utc_now_iso8601();
  double wall_seconds = 0.0;
  std::vector<std::string> outputs;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["command"] = command;
    j["args"] = args;
    j["config_paths"] = config_paths;
    j["seed"] = seed;
    j["build_id"] = build_id;
    j["started_at"] = started_at;
    j["wall_seconds"] = wall_seconds;
    j["outputs"] = outputs;
    return j;
  }

  void write(const std::filesystem::path& path) const {
    io::atomic_write(path, to_json().dump(2) + "\n");
  }
};

}  // namespace sml::cli
