#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace mrae {

inline constexpr const char* kToolVersion = "0.1.0";

/// Unreadable or malformed input (files, configs, annotation documents).
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Round-trippable decimal formatting for doubles (printf %.17g).
std::string format_full(double v);

std::string read_text(const std::filesystem::path& path);

/// Writes via a sibling temp file and rename, so failures never leave a
/// partial file at `path`.
void atomic_write_text(const std::filesystem::path& path, const std::string& content);

std::string iso8601_utc_now();

/// Sidecar record written next to every command output; re-running the same
/// command and seed reproduces the data files bit-identically (timestamps in
/// the manifest itself are excluded from that guarantee).
struct RunManifest {
    std::string command;
    nlohmann::json config;
    std::uint64_t seed = 0;
    std::vector<std::string> outputs;
    std::string started_at;
    std::string finished_at;
    nlohmann::json extra;  // free-form, e.g. timing summaries
};

void write_manifest(const std::filesystem::path& path, const RunManifest& manifest);

}  // namespace mrae
