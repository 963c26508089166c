#pragma once
// Run-directory bookkeeping: every command records its config, seeds, input
// checksums and written artifacts, then writes manifest.json atomically last.

#include "editlab/common.hpp"
#include "editlab/corpus.hpp"  // json alias

#include <chrono>
#include <filesystem>
#include <iostream>
#include <string>

namespace editlab {

inline constexpr const char* kVersion = "editlab 0.1.0";

// Collects inputs/outputs for one command and finalizes the manifest.
class RunDir {
  public:
    RunDir(std::filesystem::path out, bool quiet)
        : out_(std::move(out)), quiet_(quiet), t0_(std::chrono::steady_clock::now()) {
        std::filesystem::create_directories(out_);
    }

    const std::filesystem::path& root() const { return out_; }

    std::filesystem::path sub(const std::string& name) const {
        const auto dir = out_ / name;
        std::filesystem::create_directories(dir);
        return dir;
    }

    void log(const std::string& line) const {
        if (!quiet_) {
            std::cout << line << "\n";
        }
    }

    // Registers a file this command consumed.
    void note_input(const std::filesystem::path& path) {
        inputs_[relative(path)] = checksum_file(path);
    }

    // Registers a file this command produced (written by any means).
    void note_artifact(const std::filesystem::path& path) {
        const std::string bytes = read_file_bytes(path);
        artifacts_.push_back(json{{"path", relative(path)},
                                  {"checksum", checksum_bytes(bytes)},
                                  {"bytes", bytes.size()}});
    }

    // Convenience: write text under the run directory and record it.
    void write_artifact(const std::filesystem::path& path, const std::string& text) {
        std::filesystem::create_directories(path.parent_path());
        write_file_bytes(path, text);
        note_artifact(path);
    }

    // Writes out/manifest.json via a temporary file so the manifest appears
    // only once it is complete.
    void finish(const std::string& command, const json& config, const json& seeds) {
        const double wall =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count();
        json m;
        m["version"] = kVersion;
        m["command"] = command;
        m["config"] = config;
        m["seeds"] = seeds;
        m["inputs"] = inputs_;
        m["artifacts"] = artifacts_;
        m["wall_seconds"] = wall;
        const auto tmp = out_ / "manifest.json.tmp";
        write_file_bytes(tmp, m.dump(2) + "\n");
        std::filesystem::rename(tmp, out_ / "manifest.json");
    }

  private:
    std::string relative(const std::filesystem::path& path) const {
        std::error_code ec;
        const auto rel = std::filesystem::relative(path, out_, ec);
        return ec || rel.empty() ? path.generic_string() : rel.generic_string();
    }

    std::filesystem::path out_;
    bool quiet_ = false;
    std::chrono::steady_clock::time_point t0_;
    json inputs_ = json::object();
    json artifacts_ = json::array();
};

}  // namespace editlab
