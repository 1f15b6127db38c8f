#include "hsalab/manifest.hpp"

#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace hsalab {

std::string current_git_describe() {
  FILE* p = popen("git describe --always --dirty 2>/dev/null", "r");
  if (p == nullptr) return "unknown";
  char buf[256] = {0};
  std::string out;
  while (fgets(buf, sizeof(buf), p) != nullptr) out += buf;
  pclose(p);
  while (!out.empty() && (out.back() == '\n' || out.back() == '\r')) out.pop_back();
  return out.empty() ? "unknown" : out;
}

std::string current_time_iso8601() {
  const std::time_t now = std::time(nullptr);
  std::tm tm_utc{};
  gmtime_r(&now, &tm_utc);
  char buf[64];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm_utc);
  return buf;
}

void write_manifest(const RunManifest& m) {
  std::filesystem::create_directories(m.out_dir);
  nlohmann::json j;
  j["command"] = m.command;
  j["seed"] = m.seed;
  j["workers"] = m.workers;
  j["precision"] = m.precision;
  j["git_describe"] = m.git_describe;
  j["start_time"] = m.start_time;
  j["out_dir"] = m.out_dir;
  j["config"] = nlohmann::json::object();
  // The resolved config, key by key, exactly as the config file would spell it.
  std::istringstream cfg(serialize_run_config(m.config));
  std::string line;
  while (std::getline(cfg, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    std::string key = line.substr(0, eq);
    std::string value = line.substr(eq + 1);
    auto trim = [](std::string& s) {
      while (!s.empty() && (s.front() == ' ')) s.erase(s.begin());
      while (!s.empty() && (s.back() == ' ')) s.pop_back();
    };
    trim(key);
    trim(value);
    j["config"][key] = value;
  }
  std::ofstream out(std::filesystem::path(m.out_dir) / "manifest.json", std::ios::trunc);
  if (!out) throw InputError("manifest: cannot write into '" + m.out_dir + "'");
  out << j.dump(2) << "\n";
}

}  // namespace hsalab
