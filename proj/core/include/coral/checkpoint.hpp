#pragma once

// Checkpoint format: named-parameter container with a small manifest
// {config hash, epoch, seed}. Loading verifies the config hash and refuses
// shape mismatches instead of silently reshaping. Optimizer moments ride
// along when saved mid-training so resume is exact.

#include "coral/common.hpp"
#include "coral/model.hpp"
#include "coral/optimizer.hpp"

#include <cstring>
#include <fstream>
#include <string>

namespace coral {

struct CheckpointMeta {
  std::uint64_t config_hash = 0;
  std::uint32_t epoch = 0;
  std::uint64_t seed = 0;
  bool has_optimizer = false;
};

namespace detail {

template <class T>
void ck_put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <class T>
T ck_get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  return v;
}

template <class S>
void write_mat(std::ostream& os, const Matrix<S>& m) {
  ck_put<std::uint64_t>(os, static_cast<std::uint64_t>(m.rows()));
  ck_put<std::uint64_t>(os, static_cast<std::uint64_t>(m.cols()));
  os.write(reinterpret_cast<const char*>(m.data()),
           static_cast<std::streamsize>(sizeof(S) * static_cast<std::size_t>(m.size())));
}

template <class S>
void read_mat_into(std::istream& is, Matrix<S>& m, const std::string& name) {
  auto rows = ck_get<std::uint64_t>(is);
  auto cols = ck_get<std::uint64_t>(is);
  if (static_cast<Eigen::Index>(rows) != m.rows() || static_cast<Eigen::Index>(cols) != m.cols())
    throw ConfigError("checkpoint: shape mismatch for " + name);
  is.read(reinterpret_cast<char*>(m.data()),
          static_cast<std::streamsize>(sizeof(S) * static_cast<std::size_t>(m.size())));
}

constexpr char kCkptMagic[8] = {'C', 'O', 'R', 'A', 'L', 'C', 'K', '1'};

}  // namespace detail

template <class S>
void save_checkpoint(const std::string& path, const Model<S>& model, const CheckpointMeta& meta,
                     AdamW<S>* opt = nullptr) {
  std::ofstream os(path, std::ios::binary);
  require(os.good(), "save_checkpoint: cannot open " + path);
  os.write(detail::kCkptMagic, 8);
  detail::ck_put<std::uint32_t>(os, 1);                               // version
  detail::ck_put<std::uint32_t>(os, static_cast<std::uint32_t>(sizeof(S)));  // dtype
  detail::ck_put<std::uint64_t>(os, meta.config_hash);
  detail::ck_put<std::uint32_t>(os, meta.epoch);
  detail::ck_put<std::uint64_t>(os, meta.seed);
  detail::ck_put<std::uint32_t>(os, opt ? 1u : 0u);
  detail::ck_put<std::uint64_t>(os, model.parameters().size());
  for (const auto* p : model.parameters()) {
    detail::ck_put<std::uint32_t>(os, static_cast<std::uint32_t>(p->name.size()));
    os.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
    detail::write_mat(os, p->value);
  }
  if (opt) {
    detail::ck_put<std::uint64_t>(os, static_cast<std::uint64_t>(opt->step_count()));
    for (std::size_t i = 0; i < model.parameters().size(); ++i) {
      detail::write_mat(os, opt->moment1(i));
      detail::write_mat(os, opt->moment2(i));
    }
  }
  require(os.good(), "save_checkpoint: write failed for " + path);
}

template <class S>
CheckpointMeta load_checkpoint(const std::string& path, Model<S>& model,
                               std::uint64_t expected_config_hash, AdamW<S>* opt = nullptr) {
  std::ifstream is(path, std::ios::binary);
  require(is.good(), "load_checkpoint: cannot open " + path);
  char magic[8];
  is.read(magic, 8);
  require(is.good() && std::memcmp(magic, detail::kCkptMagic, 8) == 0,
          "load_checkpoint: bad magic in " + path);
  require(detail::ck_get<std::uint32_t>(is) == 1, "load_checkpoint: unsupported version");
  require(detail::ck_get<std::uint32_t>(is) == sizeof(S),
          "load_checkpoint: scalar width mismatch");
  CheckpointMeta meta;
  meta.config_hash = detail::ck_get<std::uint64_t>(is);
  if (expected_config_hash != 0 && meta.config_hash != expected_config_hash)
    throw ConfigError("load_checkpoint: config hash mismatch (model architecture differs)");
  meta.epoch = detail::ck_get<std::uint32_t>(is);
  meta.seed = detail::ck_get<std::uint64_t>(is);
  meta.has_optimizer = detail::ck_get<std::uint32_t>(is) != 0;
  auto n = detail::ck_get<std::uint64_t>(is);
  require(n == model.parameters().size(), "load_checkpoint: parameter count mismatch");
  for (auto* p : model.parameters()) {
    auto len = detail::ck_get<std::uint32_t>(is);
    std::string name(len, '\0');
    is.read(name.data(), len);
    require(name == p->name, "load_checkpoint: parameter order mismatch at " + name);
    detail::read_mat_into(is, p->value, name);
  }
  if (meta.has_optimizer && opt) {
    opt->set_step_count(static_cast<std::int64_t>(detail::ck_get<std::uint64_t>(is)));
    for (std::size_t i = 0; i < model.parameters().size(); ++i) {
      detail::read_mat_into(is, opt->moment1(i), "opt.m");
      detail::read_mat_into(is, opt->moment2(i), "opt.v");
    }
  }
  require(is.good(), "load_checkpoint: truncated file " + path);
  return meta;
}

}  // namespace coral
