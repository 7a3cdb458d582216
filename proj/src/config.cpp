#include "icleq/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

namespace icleq {

namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

template <class T>
T parse_integer(std::string_view text, std::string_view key) {
  T v{};
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc{} || ptr != text.data() + text.size()) {
    throw ConfigError("config key '" + std::string(key) + "': not an integer: '" +
                      std::string(text) + "'");
  }
  return v;
}

const char* loss_positions_name(LossPositions p) {
  return p == LossPositions::all_y ? "all_y" : "final_only";
}

}  // namespace

ConfigMap parse_config(std::string_view text) {
  ConfigMap out;
  std::set<std::string, std::less<>> seen;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    line = trim(line);
    if (line.empty() || line.front() == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
    }
    std::string key(trim(line.substr(0, eq)));
    std::string value(trim(line.substr(eq + 1)));
    if (key.empty()) throw ConfigError("config line " + std::to_string(line_no) + ": empty key");
    if (!seen.insert(key).second) {
      throw ConfigError("config line " + std::to_string(line_no) + ": duplicate key '" + key + "'");
    }
    out.emplace_back(std::move(key), std::move(value));
  }
  return out;
}

ConfigMap read_config_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string format_config(const ConfigMap& map) {
  std::string out;
  for (const auto& [k, v] : map) out += k + " = " + v + "\n";
  return out;
}

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  if (ec != std::errc{}) throw std::runtime_error("format_double failed");
  return std::string(buf, ptr);
}

double parse_double(std::string_view text) {
  text = trim(text);
  if (text == "nan") return std::numeric_limits<double>::quiet_NaN();
  if (text == "inf") return std::numeric_limits<double>::infinity();
  if (text == "-inf") return -std::numeric_limits<double>::infinity();
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc{} || ptr != text.data() + text.size() || text.empty()) {
    throw ConfigError("not a number: '" + std::string(text) + "'");
  }
  return v;
}

ConfigReader::ConfigReader(ConfigMap map) : map_(std::move(map)) {}

const std::string* ConfigReader::find(std::string_view key) {
  for (const auto& [k, v] : map_) {
    if (k == key) {
      used_.insert(k);
      return &v;
    }
  }
  return nullptr;
}

bool ConfigReader::read(std::string_view key, int& out) {
  const std::string* v = find(key);
  if (!v) return false;
  out = parse_integer<int>(*v, key);
  return true;
}

bool ConfigReader::read_unsigned(std::string_view key, std::uint64_t& out) {
  const std::string* v = find(key);
  if (!v) return false;
  out = parse_integer<std::uint64_t>(*v, key);
  return true;
}

bool ConfigReader::read(std::string_view key, double& out) {
  const std::string* v = find(key);
  if (!v) return false;
  try {
    out = parse_double(*v);
  } catch (const ConfigError& e) {
    throw ConfigError("config key '" + std::string(key) + "': " + e.what());
  }
  return true;
}

bool ConfigReader::read(std::string_view key, bool& out) {
  const std::string* v = find(key);
  if (!v) return false;
  if (*v == "true" || *v == "1") {
    out = true;
  } else if (*v == "false" || *v == "0") {
    out = false;
  } else {
    throw ConfigError("config key '" + std::string(key) + "': expected true or false");
  }
  return true;
}

bool ConfigReader::read(std::string_view key, std::string& out) {
  const std::string* v = find(key);
  if (!v) return false;
  out = *v;
  return true;
}

bool ConfigReader::read_bits(std::string_view key, std::optional<int>& out) {
  const std::string* v = find(key);
  if (!v) return false;
  try {
    out = parse_bits(*v);
  } catch (const ConfigError& e) {
    throw ConfigError("config key '" + std::string(key) + "': " + e.what());
  }
  return true;
}

bool ConfigReader::read_list(std::string_view key, std::vector<double>& out) {
  const std::string* v = find(key);
  if (!v) return false;
  out.clear();
  std::string_view rest = *v;
  while (true) {
    const auto comma = rest.find(',');
    const std::string_view item = trim(rest.substr(0, comma));
    if (!item.empty()) {
      try {
        out.push_back(parse_double(item));
      } catch (const ConfigError& e) {
        throw ConfigError("config key '" + std::string(key) + "': " + e.what());
      }
    }
    if (comma == std::string_view::npos) break;
    rest = rest.substr(comma + 1);
  }
  if (out.empty()) throw ConfigError("config key '" + std::string(key) + "': empty list");
  return true;
}

void ConfigReader::require_all_consumed() const {
  std::string unknown;
  for (const auto& [k, v] : map_) {
    if (!used_.contains(k)) unknown += (unknown.empty() ? "" : ", ") + k;
  }
  if (!unknown.empty()) throw ConfigError("unknown config keys: " + unknown);
}

std::string format_bits(const std::optional<int>& bits) {
  return bits ? std::to_string(*bits) : std::string("unquantized");
}

std::optional<int> parse_bits(std::string_view text) {
  text = trim(text);
  if (text == "unquantized" || text == "inf") return std::nullopt;
  const int b = parse_integer<int>(text, "bits");
  if (b < 1) throw ConfigError("bits must be at least 1 or 'unquantized'");
  return b;
}

std::string format_list(const std::vector<double>& values) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out += ",";
    out += format_double(values[i]);
  }
  return out;
}

void read_train_config(ConfigReader& r, TrainConfig& c) {
  r.read("n_t", c.model.n_t);
  r.read("n_r", c.model.n_r);
  r.read("n_layers", c.model.n_layers);
  r.read("n_heads", c.model.n_heads);
  r.read("d_e", c.model.d_e);
  r.read("d_f", c.model.d_f);
  r.read("n_max", c.model.n_max);
  r.read("use_causal_mask", c.model.use_causal_mask);
  r.read("use_positional", c.model.use_positional);
  c.tasks.n_t = c.model.n_t;
  c.tasks.n_r = c.model.n_r;
  r.read("sigma2_db_min", c.tasks.sigma2_db_min);
  r.read("sigma2_db_max", c.tasks.sigma2_db_max);
  r.read_bits("bits", c.bits);
  r.read("m_tasks", c.m_tasks);
  r.read("n_context", c.n_context);
  r.read("batch_size", c.batch_size);
  r.read("n_steps", c.n_steps);
  r.read("lr", c.lr);
  r.read("warmup_steps", c.warmup_steps);
  r.read("beta1", c.beta1);
  r.read("beta2", c.beta2);
  r.read("epsilon", c.epsilon);
  r.read("clip_norm", c.clip_norm);
  std::string positions;
  if (r.read("loss_positions", positions)) {
    if (positions == "all_y") {
      c.loss_positions = LossPositions::all_y;
    } else if (positions == "final_only") {
      c.loss_positions = LossPositions::final_only;
    } else {
      throw ConfigError("loss_positions must be all_y or final_only");
    }
  }
  r.read("seed", c.seed);
  r.read("threads", c.threads);
}

void write_train_config(ConfigMap& m, const TrainConfig& c) {
  auto put = [&](const char* k, std::string v) { m.emplace_back(k, std::move(v)); };
  put("n_t", std::to_string(c.model.n_t));
  put("n_r", std::to_string(c.model.n_r));
  put("n_layers", std::to_string(c.model.n_layers));
  put("n_heads", std::to_string(c.model.n_heads));
  put("d_e", std::to_string(c.model.d_e));
  put("d_f", std::to_string(c.model.d_f));
  put("n_max", std::to_string(c.model.n_max));
  put("use_causal_mask", c.model.use_causal_mask ? "true" : "false");
  put("use_positional", c.model.use_positional ? "true" : "false");
  put("sigma2_db_min", format_double(c.tasks.sigma2_db_min));
  put("sigma2_db_max", format_double(c.tasks.sigma2_db_max));
  put("bits", format_bits(c.bits));
  put("m_tasks", std::to_string(c.m_tasks));
  put("n_context", std::to_string(c.n_context));
  put("batch_size", std::to_string(c.batch_size));
  put("n_steps", std::to_string(c.n_steps));
  put("lr", format_double(c.lr));
  put("warmup_steps", std::to_string(c.warmup_steps));
  put("beta1", format_double(c.beta1));
  put("beta2", format_double(c.beta2));
  put("epsilon", format_double(c.epsilon));
  put("clip_norm", format_double(c.clip_norm));
  put("loss_positions", loss_positions_name(c.loss_positions));
  put("seed", std::to_string(c.seed));
  put("threads", std::to_string(c.threads));
}

ConfigMap to_config_map(const TrainConfig& config) {
  ConfigMap m;
  write_train_config(m, config);
  return m;
}

TrainConfig train_config_from_map(const ConfigMap& map, const TrainConfig& defaults) {
  ConfigReader r(map);
  TrainConfig c = defaults;
  read_train_config(r, c);
  r.require_all_consumed();
  return c;
}

}  // namespace icleq
