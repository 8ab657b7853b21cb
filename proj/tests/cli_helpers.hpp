#pragma once

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <map>
#include <string>

#include "lookout/io.hpp"

#ifndef LOOKOUT_CLI
#error "LOOKOUT_CLI must name the CLI executable"
#endif

namespace lookout::testing {

namespace fs = std::filesystem;

inline fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("lookout_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

/// Runs the CLI with `args` (shell syntax) and returns its exit status.
inline int run_cli(const std::string& args, const fs::path& log = {}) {
  std::string cmd = std::string("\"") + LOOKOUT_CLI + "\" " + args;
  cmd += log.empty() ? " > /dev/null 2>&1" : " > \"" + log.string() + "\" 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

/// Content hash of every file under `dir` except run manifests (they carry wall-clock times).
inline std::map<std::string, std::uint64_t> tree_hashes(const fs::path& dir) {
  std::map<std::string, std::uint64_t> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file() || e.path().filename() == "run_manifest.json") continue;
    out[fs::relative(e.path(), dir).string()] = io::file_hash(e.path());
  }
  return out;
}

inline std::string slurp(const fs::path& p) { return io::read_text(p); }

}  // namespace lookout::testing
