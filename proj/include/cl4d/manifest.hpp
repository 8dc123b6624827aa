#pragma once

// Reproducibility manifest written beside every artifact-producing command's
// output: the resolved config, seeds, input hashes and tool version.

#include <chrono>
#include <map>
#include <string>

#include "json.hpp"

#include "cl4d/common.hpp"

namespace cl4d {

constexpr const char* kToolVersion = "cl4d 0.1.0";

struct RunManifest {
  std::string command;
  nlohmann::ordered_json config = nlohmann::ordered_json::object();
  std::uint64_t seed = 0;
  std::map<std::string, std::string> input_hashes;  // path -> sha256
  double wall_time_ms = 0;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["tool"] = kToolVersion;
    j["command"] = command;
    j["seed"] = seed;
    j["config"] = config;
    nlohmann::ordered_json inputs;
    for (const auto& [path, hash] : input_hashes) inputs[path] = hash;
    j["inputs"] = inputs;
    j["wall_time_ms"] = wall_time_ms;
    return j;
  }

  // written as <output>.manifest.json
  void write_beside(const std::filesystem::path& output) const {
    write_file(output.string() + ".manifest.json", to_json().dump(2) + "\n");
  }
};

class ManifestTimer {
 public:
  ManifestTimer() : start_(std::chrono::steady_clock::now()) {}
  double elapsed_ms() const {
    return std::chrono::duration<double, std::milli>(
               std::chrono::steady_clock::now() - start_)
        .count();
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

}  // namespace cl4d
