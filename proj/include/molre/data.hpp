#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "molre/errors.hpp"
#include "molre/model.hpp"
#include "molre/rng.hpp"
#include "molre/tensor.hpp"

namespace molre {

struct DatasetConfig {
  std::size_t num_utterances = 64;  // O
  std::size_t t_text = 6;
  std::size_t t_audio = 5;
  std::size_t d = 32;
  std::size_t classes = 6;
  std::size_t latent_dim = 8;
  double task_correlation = 0.7;  // rho: shared-latent weight in both tasks' scores
  double noise_std = 0.1;
  std::uint64_t seed = 1;

  void validate() const {
    if (num_utterances < 1) throw ConfigError("data.num_utterances: must be >= 1");
    if (d < 1) throw ConfigError("data.d: must be >= 1");
    if (classes < 1) throw ConfigError("data.classes: must be >= 1");
    if (latent_dim < 1) throw ConfigError("data.latent_dim: must be >= 1");
    if (!(task_correlation >= 0.0 && task_correlation <= 1.0)) {
      throw ValueError("data.task_correlation: must be in [0, 1], got " +
                       std::to_string(task_correlation));
    }
    if (!(noise_std >= 0.0)) throw ConfigError("data.noise_std: must be >= 0");
  }
};

struct GeneratedDataset {
  std::vector<Sample> samples;
  // The per-sample pre-threshold scores both label sets derive from; used by
  // the statistics tests probing the task-correlation knob.
  std::vector<double> sa_scores;
  std::vector<double> er_scores;
};

/// Seeded synthetic dataset. Each sample draws a shared latent u and
/// task-specific latents; both tasks' labels derive from scores along a
/// single affect direction w (sentiment from the SA mixture, per-class
/// thresholded sigmoids from the ER mixture with class-specific slopes and
/// offsets). Features are linear renderings of the latents with a time ramp
/// plus Gaussian noise, so sequence order carries signal.
inline GeneratedDataset generate_dataset(const DatasetConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  const std::size_t ld = cfg.latent_dim;
  const std::size_t z_dim = 3 * ld;

  // Dataset-level parameters, drawn once.
  std::vector<double> w(ld);
  double norm = 0.0;
  for (double& v : w) {
    v = rng.normal();
    norm += v * v;
  }
  norm = std::sqrt(norm);
  for (double& v : w) v = 2.0 * v / norm;  // scores get stddev ~2, labels span [-3, 3]

  std::vector<double> class_slope(cfg.classes), class_offset(cfg.classes);
  for (std::size_t j = 0; j < cfg.classes; ++j) {
    const double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
    class_slope[j] = sign * rng.uniform(0.6, 1.4);
    class_offset[j] = rng.uniform(-0.8, 0.8);
  }

  const double render_scale = 1.0 / std::sqrt(static_cast<double>(z_dim));
  auto draw_matrix = [&](std::size_t rows) {
    std::vector<double> m(rows * z_dim);
    for (double& v : m) v = render_scale * rng.normal();
    return m;
  };
  const std::vector<double> base_t = draw_matrix(cfg.d);
  const std::vector<double> ramp_t = draw_matrix(cfg.d);
  const std::vector<double> base_a = draw_matrix(cfg.d);
  const std::vector<double> ramp_a = draw_matrix(cfg.d);

  auto matvec = [&](const std::vector<double>& m, const std::vector<double>& z) {
    std::vector<double> out(cfg.d, 0.0);
    for (std::size_t i = 0; i < cfg.d; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < z_dim; ++j) acc += m[i * z_dim + j] * z[j];
      out[i] = acc;
    }
    return out;
  };

  GeneratedDataset out;
  out.samples.reserve(cfg.num_utterances);
  const double rho = cfg.task_correlation;
  for (std::size_t s = 0; s < cfg.num_utterances; ++s) {
    std::vector<double> z(z_dim);
    for (double& v : z) v = rng.normal();
    // z = [u, v_sa, v_er]
    double score_sa = 0.0, score_er = 0.0;
    for (std::size_t j = 0; j < ld; ++j) {
      score_sa += w[j] * (rho * z[j] + (1.0 - rho) * z[ld + j]);
      score_er += w[j] * (rho * z[j] + (1.0 - rho) * z[2 * ld + j]);
    }
    Sample sample;
    sample.y_r = std::min(std::max(score_sa, -3.0), 3.0);
    sample.y_c.resize(cfg.classes);
    for (std::size_t j = 0; j < cfg.classes; ++j) {
      sample.y_c[j] = (class_slope[j] * score_er + class_offset[j] >= 0.0) ? 1 : 0;
    }

    auto render = [&](const std::vector<double>& base, const std::vector<double>& ramp,
                      std::size_t t_len) {
      Tensor x = Tensor::zeros({t_len, cfg.d});
      const std::vector<double> b = matvec(base, z);
      const std::vector<double> r = matvec(ramp, z);
      for (std::size_t t = 0; t < t_len; ++t) {
        const double pos = t_len > 1 ? static_cast<double>(t) / static_cast<double>(t_len - 1)
                                     : 0.0;
        for (std::size_t i = 0; i < cfg.d; ++i) {
          x.values()[t * cfg.d + i] = b[i] + pos * r[i] + cfg.noise_std * rng.normal();
        }
      }
      return x;
    };
    sample.x_t = render(base_t, ramp_t, cfg.t_text);
    sample.x_a = render(base_a, ramp_a, cfg.t_audio);

    out.sa_scores.push_back(score_sa);
    out.er_scores.push_back(score_er);
    out.samples.push_back(std::move(sample));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Binary feature file ("MOLR")
// ---------------------------------------------------------------------------
//
// Layout, all integers little-endian:
//   magic   4 bytes  "MOLR"
//   version u16      (currently 1)
//   header  5 x u32  O, T_t, T_a, d, C
//   payload per sample:
//     x_t   T_t*d float32, row-major
//     x_a   T_a*d float32, row-major
//     y_r   float32
//     y_c   C bytes, each 0 or 1

namespace detail {

inline void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xFF));
  out.push_back(static_cast<std::uint8_t>((v >> 8) & 0xFF));
}

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF));
}

inline void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF));
}

inline void put_f32(std::vector<std::uint8_t>& out, float v) {
  put_u32(out, std::bit_cast<std::uint32_t>(v));
}

inline void put_f64(std::vector<std::uint8_t>& out, double v) {
  put_u64(out, std::bit_cast<std::uint64_t>(v));
}

class ByteReader {
 public:
  ByteReader(const std::vector<std::uint8_t>& buf, std::string what)
      : buf_(buf), what_(std::move(what)) {}

  std::uint16_t u16() { return static_cast<std::uint16_t>(byte() | (byte() << 8)); }

  std::uint32_t u32() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(byte()) << (8 * i);
    return v;
  }

  std::uint64_t u64() {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(byte()) << (8 * i);
    return v;
  }

  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }

  std::uint8_t byte() {
    if (pos_ >= buf_.size()) {
      throw DataFileError(DataFileError::Kind::Truncated,
                          what_ + ": truncated, needed byte " + std::to_string(pos_ + 1) +
                              " of a " + std::to_string(buf_.size()) + "-byte file");
    }
    return buf_[pos_++];
  }

  std::size_t remaining() const { return buf_.size() - pos_; }
  std::size_t pos() const { return pos_; }

 private:
  const std::vector<std::uint8_t>& buf_;
  std::string what_;
  std::size_t pos_ = 0;
};

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataFileError(DataFileError::Kind::Io, "cannot open '" + path + "' for reading");
  std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(in)),
                                std::istreambuf_iterator<char>());
  return buf;
}

inline void write_file_bytes(const std::string& path, const std::vector<std::uint8_t>& buf) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataFileError(DataFileError::Kind::Io, "cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!out) throw DataFileError(DataFileError::Kind::Io, "short write to '" + path + "'");
}

}  // namespace detail

constexpr std::uint16_t kFeatureFileVersion = 1;

inline void write_features(const std::string& path, const std::vector<Sample>& samples) {
  if (samples.empty()) throw ValueError("write_features: empty sample list");
  const std::size_t t_t = samples[0].x_t.shape()[0];
  const std::size_t t_a = samples[0].x_a.shape()[0];
  const std::size_t d = samples[0].x_t.shape()[1];
  const std::size_t c = samples[0].y_c.size();
  for (const Sample& s : samples) {
    if (s.x_t.shape() != std::vector<std::size_t>{t_t, d} ||
        s.x_a.shape() != std::vector<std::size_t>{t_a, d} || s.y_c.size() != c) {
      throw ShapeError("write_features: samples have inconsistent shapes");
    }
  }
  std::vector<std::uint8_t> buf;
  buf.reserve(26 + samples.size() * ((t_t + t_a) * d * 4 + 4 + c));
  buf.push_back('M');
  buf.push_back('O');
  buf.push_back('L');
  buf.push_back('R');
  detail::put_u16(buf, kFeatureFileVersion);
  detail::put_u32(buf, static_cast<std::uint32_t>(samples.size()));
  detail::put_u32(buf, static_cast<std::uint32_t>(t_t));
  detail::put_u32(buf, static_cast<std::uint32_t>(t_a));
  detail::put_u32(buf, static_cast<std::uint32_t>(d));
  detail::put_u32(buf, static_cast<std::uint32_t>(c));
  for (const Sample& s : samples) {
    for (double v : s.x_t.values()) detail::put_f32(buf, static_cast<float>(v));
    for (double v : s.x_a.values()) detail::put_f32(buf, static_cast<float>(v));
    detail::put_f32(buf, static_cast<float>(s.y_r));
    for (std::uint8_t v : s.y_c) buf.push_back(v ? 1 : 0);
  }
  detail::write_file_bytes(path, buf);
}

inline std::vector<Sample> read_features(const std::string& path) {
  const std::vector<std::uint8_t> buf = detail::read_file_bytes(path);
  detail::ByteReader r(buf, "feature file '" + path + "'");
  char magic[4];
  for (char& ch : magic) ch = static_cast<char>(r.byte());
  if (std::memcmp(magic, "MOLR", 4) != 0) {
    throw DataFileError(DataFileError::Kind::BadMagic,
                        "feature file '" + path + "': bad magic bytes '" +
                            std::string(magic, 4) + "', expected 'MOLR'");
  }
  const std::uint16_t version = r.u16();
  if (version != kFeatureFileVersion) {
    throw DataFileError(DataFileError::Kind::BadVersion,
                        "feature file '" + path + "': unsupported version " +
                            std::to_string(version));
  }
  const std::uint64_t o = r.u32();
  const std::uint64_t t_t = r.u32();
  const std::uint64_t t_a = r.u32();
  const std::uint64_t d = r.u32();
  const std::uint64_t c = r.u32();
  const std::uint64_t expected = 26 + o * ((t_t + t_a) * d * 4 + 4 + c);
  if (buf.size() < expected) {
    throw DataFileError(DataFileError::Kind::Truncated,
                        "feature file '" + path + "': header declares " +
                            std::to_string(expected) + " bytes, file has " +
                            std::to_string(buf.size()));
  }
  if (buf.size() > expected) {
    throw DataFileError(DataFileError::Kind::LengthMismatch,
                        "feature file '" + path + "': header declares " +
                            std::to_string(expected) + " bytes, file has " +
                            std::to_string(buf.size()));
  }
  std::vector<Sample> samples;
  samples.reserve(o);
  for (std::uint64_t i = 0; i < o; ++i) {
    Sample s;
    s.x_t = Tensor::zeros({t_t, d});
    for (double& v : s.x_t.values()) v = static_cast<double>(r.f32());
    s.x_a = Tensor::zeros({t_a, d});
    for (double& v : s.x_a.values()) v = static_cast<double>(r.f32());
    s.y_r = static_cast<double>(r.f32());
    if (!std::isfinite(s.y_r)) {
      throw DataFileError(DataFileError::Kind::BadValue,
                          "feature file '" + path + "': non-finite sentiment label at sample " +
                              std::to_string(i));
    }
    s.y_c.resize(c);
    for (std::uint64_t j = 0; j < c; ++j) {
      const std::uint8_t b = r.byte();
      if (b > 1) {
        throw DataFileError(DataFileError::Kind::BadValue,
                            "feature file '" + path + "': label byte " + std::to_string(b) +
                                " at sample " + std::to_string(i) + " is not 0/1");
      }
      s.y_c[j] = b;
    }
    samples.push_back(std::move(s));
  }
  return samples;
}

// ---------------------------------------------------------------------------
// Weights file ("MOLW"): same header discipline, float64 payload
// ---------------------------------------------------------------------------

constexpr std::uint16_t kWeightsFileVersion = 1;

inline void save_weights(const std::string& path, const std::vector<std::string>& names,
                         const std::vector<Tensor>& params) {
  if (names.size() != params.size()) {
    throw ValueError("save_weights: name/parameter count mismatch");
  }
  std::vector<std::uint8_t> buf;
  buf.push_back('M');
  buf.push_back('O');
  buf.push_back('L');
  buf.push_back('W');
  detail::put_u16(buf, kWeightsFileVersion);
  detail::put_u32(buf, static_cast<std::uint32_t>(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    detail::put_u16(buf, static_cast<std::uint16_t>(names[i].size()));
    for (char ch : names[i]) buf.push_back(static_cast<std::uint8_t>(ch));
    buf.push_back(static_cast<std::uint8_t>(params[i].rank()));
    for (std::size_t dim : params[i].shape()) {
      detail::put_u32(buf, static_cast<std::uint32_t>(dim));
    }
    for (double v : params[i].values()) detail::put_f64(buf, v);
  }
  detail::write_file_bytes(path, buf);
}

/// Loads weights into an existing parameter list; names and shapes must
/// match the file exactly.
inline void load_weights(const std::string& path, const std::vector<std::string>& names,
                         const std::vector<Tensor>& params) {
  const std::vector<std::uint8_t> buf = detail::read_file_bytes(path);
  detail::ByteReader r(buf, "weights file '" + path + "'");
  char magic[4];
  for (char& ch : magic) ch = static_cast<char>(r.byte());
  if (std::memcmp(magic, "MOLW", 4) != 0) {
    throw DataFileError(DataFileError::Kind::BadMagic,
                        "weights file '" + path + "': bad magic bytes");
  }
  if (r.u16() != kWeightsFileVersion) {
    throw DataFileError(DataFileError::Kind::BadVersion,
                        "weights file '" + path + "': unsupported version");
  }
  const std::uint32_t count = r.u32();
  if (count != params.size()) {
    throw DataFileError(DataFileError::Kind::LengthMismatch,
                        "weights file '" + path + "': holds " + std::to_string(count) +
                            " tensors, model has " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint16_t name_len = r.u16();
    std::string name(name_len, '\0');
    for (char& ch : name) ch = static_cast<char>(r.byte());
    if (name != names[i]) {
      throw DataFileError(DataFileError::Kind::LengthMismatch,
                          "weights file '" + path + "': tensor " + std::to_string(i) +
                              " is named '" + name + "', model expects '" + names[i] + "'");
    }
    const std::uint8_t rank = r.byte();
    std::vector<std::size_t> shape(rank);
    for (std::size_t& dim : shape) dim = r.u32();
    Tensor p = params[i];
    if (shape != p.shape()) {
      throw DataFileError(DataFileError::Kind::LengthMismatch,
                          "weights file '" + path + "': tensor '" + name + "' has shape " +
                              detail::shape_str(shape) + ", model expects " +
                              detail::shape_str(p.shape()));
    }
    for (double& v : p.values()) v = r.f64();
  }
  if (r.remaining() != 0) {
    throw DataFileError(DataFileError::Kind::LengthMismatch,
                        "weights file '" + path + "': " + std::to_string(r.remaining()) +
                            " trailing bytes");
  }
}

}  // namespace molre
