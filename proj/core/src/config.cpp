#include "hsalab/config.hpp"

#include <fstream>
#include <sstream>

namespace hsalab {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::size_t parse_size(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const unsigned long long x = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return static_cast<std::size_t>(x);
  } catch (const std::exception&) {
    throw ConfigError("config: key '" + key + "' expects an unsigned integer, got '" + v + "'");
  }
}

double parse_real(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double x = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError("config: key '" + key + "' expects a real number, got '" + v + "'");
  }
}

}  // namespace

void apply_config_override(RunConfig& cfg, const std::string& key, const std::string& value) {
  if (key == "d") cfg.model.d = parse_size(key, value);
  else if (key == "g") cfg.model.g = parse_size(key, value);
  else if (key == "h") cfg.model.h = parse_size(key, value);
  else if (key == "d_h") cfg.model.d_h = parse_size(key, value);
  else if (key == "S") cfg.model.S = parse_size(key, value);
  else if (key == "K") cfg.model.K = parse_size(key, value);
  else if (key == "L") cfg.model.L = parse_size(key, value);
  else if (key == "G") cfg.model.G = parse_size(key, value);
  else if (key == "vocab") cfg.model.vocab = parse_size(key, value);
  else if (key == "enc_layers") cfg.model.enc_layers = parse_size(key, value);
  else if (key == "seg_len") cfg.model.seg_len = parse_size(key, value);
  else if (key == "lr_peak") cfg.optim.lr_peak = parse_real(key, value);
  else if (key == "lr_min") cfg.optim.lr_min = parse_real(key, value);
  else if (key == "warmup_ratio") cfg.optim.warmup_ratio = parse_real(key, value);
  else if (key == "weight_decay") cfg.optim.weight_decay = parse_real(key, value);
  else if (key == "beta1") cfg.optim.beta1 = parse_real(key, value);
  else if (key == "beta2") cfg.optim.beta2 = parse_real(key, value);
  else if (key == "clip") cfg.optim.clip = parse_real(key, value);
  else if (key == "total_steps") cfg.optim.total_steps = parse_size(key, value);
  else if (key == "batch") cfg.optim.batch = parse_size(key, value);
  else if (key == "task") cfg.task.task = value;
  else if (key == "context_len") cfg.task.context_len = parse_size(key, value);
  else if (key == "key_len") cfg.task.key_len = parse_size(key, value);
  else if (key == "corpus_path") cfg.task.corpus_path = value;
  else if (key == "mode") cfg.mode = reset_mode_from_name(value);
  else if (key == "checkpoint_every") cfg.checkpoint_every = parse_size(key, value);
  else throw ConfigError("config: unknown key '" + key + "'");
}

RunConfig parse_run_config(const std::string& text) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config: line " + std::to_string(lineno) + " is not key=value: '" + line + "'");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("config: empty key on line " + std::to_string(lineno));
    apply_config_override(cfg, key, value);
  }
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

std::string serialize_run_config(const RunConfig& cfg) {
  std::ostringstream os;
  os << "d = " << cfg.model.d << "\n";
  os << "g = " << cfg.model.g << "\n";
  os << "h = " << cfg.model.h << "\n";
  os << "d_h = " << cfg.model.d_h << "\n";
  os << "S = " << cfg.model.S << "\n";
  os << "K = " << cfg.model.K << "\n";
  os << "L = " << cfg.model.L << "\n";
  os << "G = " << cfg.model.G << "\n";
  os << "vocab = " << cfg.model.vocab << "\n";
  os << "enc_layers = " << cfg.model.enc_layers << "\n";
  os << "seg_len = " << cfg.model.seg_len << "\n";
  os << "lr_peak = " << cfg.optim.lr_peak << "\n";
  os << "lr_min = " << cfg.optim.lr_min << "\n";
  os << "warmup_ratio = " << cfg.optim.warmup_ratio << "\n";
  os << "weight_decay = " << cfg.optim.weight_decay << "\n";
  os << "beta1 = " << cfg.optim.beta1 << "\n";
  os << "beta2 = " << cfg.optim.beta2 << "\n";
  os << "clip = " << cfg.optim.clip << "\n";
  os << "total_steps = " << cfg.optim.total_steps << "\n";
  os << "batch = " << cfg.optim.batch << "\n";
  os << "task = " << cfg.task.task << "\n";
  os << "context_len = " << cfg.task.context_len << "\n";
  os << "key_len = " << cfg.task.key_len << "\n";
  if (!cfg.task.corpus_path.empty()) os << "corpus_path = " << cfg.task.corpus_path << "\n";
  os << "mode = " << reset_mode_name(cfg.mode) << "\n";
  os << "checkpoint_every = " << cfg.checkpoint_every << "\n";
  return os.str();
}

}  // namespace hsalab
