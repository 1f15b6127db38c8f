#pragma once

#include <cstdint>
#include <string>

#include "hsalab/config.hpp"

namespace hsalab {

// Written into the output directory before any work starts; every artifact of
// a run lands under out_dir.
struct RunManifest {
  std::string command;
  RunConfig config;
  std::uint64_t seed = 0;
  unsigned workers = 0;
  std::string precision;  // "f32" or "f64"
  std::string git_describe;
  std::string start_time;  // ISO-8601 UTC
  std::string out_dir;
};

std::string current_git_describe();
std::string current_time_iso8601();

// Creates out_dir if needed and writes manifest.json inside it.
void write_manifest(const RunManifest& m);

}  // namespace hsalab
