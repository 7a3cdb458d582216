#include "icleq/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "icleq/config.hpp"

namespace icleq {

namespace {

template <class T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
    std::memcpy(&v, b, sizeof(T));
  }
  return v;
}

class Writer {
 public:
  template <class T>
  void put(T v) {
    v = to_little(v);
    const auto* p = reinterpret_cast<const char*>(&v);
    buf_.append(p, sizeof(T));
  }
  void put_string(const std::string& s) {
    put(static_cast<std::uint32_t>(s.size()));
    buf_ += s;
  }
  void put_raw(const char* p, std::size_t n) { buf_.append(p, n); }
  const std::string& bytes() const { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  explicit Reader(std::string bytes) : buf_(std::move(bytes)) {}

  template <class T>
  T get(const char* what) {
    need(sizeof(T), what);
    T v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return to_little(v);
  }
  std::string get_string(const char* what) {
    const auto n = get<std::uint32_t>(what);
    need(n, what);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::string get_raw(std::size_t n, const char* what) {
    need(n, what);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool at_end() const { return pos_ == buf_.size(); }

 private:
  void need(std::size_t n, const char* what) {
    if (buf_.size() - pos_ < n) {
      throw CheckpointFormatError(std::string("checkpoint truncated while reading ") + what);
    }
  }

  std::string buf_;
  std::size_t pos_ = 0;
};

std::string describe(const ModelConfig& c) {
  return "L=" + std::to_string(c.n_layers) + " H=" + std::to_string(c.n_heads) +
         " d_e=" + std::to_string(c.d_e) + " d_f=" + std::to_string(c.d_f) +
         " n_max=" + std::to_string(c.n_max) + " n_t=" + std::to_string(c.n_t) +
         " n_r=" + std::to_string(c.n_r);
}

}  // namespace

void save_checkpoint(const ModelParams& params, const TrainConfig& config,
                     const std::filesystem::path& path) {
  Writer w;
  w.put_raw(kCheckpointMagic, sizeof kCheckpointMagic);
  w.put(kCheckpointVersion);
  const ConfigMap map = to_config_map(config);
  w.put(static_cast<std::uint32_t>(map.size()));
  for (const auto& [k, v] : map) {
    w.put_string(k);
    w.put_string(v);
  }
  std::uint32_t count = 0;
  params.visit([&](const std::string&, const Matrix&) { ++count; });
  w.put(count);
  params.visit([&](const std::string& name, const Matrix& t) {
    w.put_string(name);
    w.put(std::uint32_t{2});
    w.put(static_cast<std::uint64_t>(t.rows()));
    w.put(static_cast<std::uint64_t>(t.cols()));
    for (Eigen::Index r = 0; r < t.rows(); ++r) {
      for (Eigen::Index c = 0; c < t.cols(); ++c) w.put(t(r, c));
    }
  });

  // Write to a sibling file first so a crash never leaves a partial checkpoint.
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write checkpoint " + tmp.string());
    out.write(w.bytes().data(), static_cast<std::streamsize>(w.bytes().size()));
    if (!out) throw std::runtime_error("write failed for checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  Reader r(ss.str());

  if (r.get_raw(sizeof kCheckpointMagic, "magic") !=
      std::string(kCheckpointMagic, sizeof kCheckpointMagic)) {
    throw CheckpointFormatError("not a checkpoint file (bad magic): " + path.string());
  }
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw CheckpointFormatError("unsupported checkpoint version " + std::to_string(version) +
                                " (expected " + std::to_string(kCheckpointVersion) + ")");
  }

  ConfigMap map;
  const auto pairs = r.get<std::uint32_t>("config size");
  for (std::uint32_t i = 0; i < pairs; ++i) {
    std::string k = r.get_string("config key");
    std::string v = r.get_string("config value");
    map.emplace_back(std::move(k), std::move(v));
  }
  Checkpoint ck;
  try {
    ck.config = train_config_from_map(map);
    ck.config.model.validate();
  } catch (const std::exception& e) {
    throw CheckpointFormatError(std::string("checkpoint config invalid: ") + e.what());
  }
  ck.params = ModelParams::zeros(ck.config.model);

  std::vector<std::pair<std::string, Matrix*>> slots;
  ck.params.visit([&](const std::string& name, Matrix& t) { slots.emplace_back(name, &t); });
  const auto count = r.get<std::uint32_t>("tensor count");
  if (count != slots.size()) {
    throw CheckpointShapeError("checkpoint holds " + std::to_string(count) + " tensors, model " +
                               describe(ck.config.model) + " needs " +
                               std::to_string(slots.size()));
  }
  for (auto& [name, tensor] : slots) {
    const std::string stored = r.get_string("tensor name");
    if (stored != name) {
      throw CheckpointShapeError("checkpoint tensor '" + stored + "' where '" + name +
                                 "' was expected");
    }
    const auto rank = r.get<std::uint32_t>("tensor rank");
    if (rank != 2) throw CheckpointFormatError("tensor '" + name + "' has unsupported rank");
    const auto rows = r.get<std::uint64_t>("tensor dims");
    const auto cols = r.get<std::uint64_t>("tensor dims");
    if (rows != static_cast<std::uint64_t>(tensor->rows()) ||
        cols != static_cast<std::uint64_t>(tensor->cols())) {
      throw CheckpointShapeError("tensor '" + name + "' is " + std::to_string(rows) + "x" +
                                 std::to_string(cols) + ", expected " +
                                 std::to_string(tensor->rows()) + "x" +
                                 std::to_string(tensor->cols()));
    }
    for (Eigen::Index i = 0; i < tensor->rows(); ++i) {
      for (Eigen::Index j = 0; j < tensor->cols(); ++j) (*tensor)(i, j) = r.get<double>("tensor data");
    }
  }
  if (!r.at_end()) throw CheckpointFormatError("trailing bytes after checkpoint tensors");
  return ck;
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig& expected) {
  Checkpoint ck = load_checkpoint(path);
  if (!(ck.config.model == expected)) {
    throw CheckpointShapeError("checkpoint model (" + describe(ck.config.model) +
                               ") does not match expected (" + describe(expected) + ")");
  }
  return ck;
}

}  // namespace icleq
