#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "xdial/model.hpp"

// Checkpoint directory layout:
//   manifest.json  - config, progress counters, vocab fingerprint, and a
//                    name -> (shape, offset, length) index for both blobs
//   params.bin     - raw little-endian tensor data, lexicographic name order
//   optim.bin      - optimizer first/second moments, same ordering scheme

namespace xdial {

struct TensorRecord {
  std::string name;
  Shape shape;
  std::int64_t offset = 0;  // elements from the start of the blob
  std::int64_t length = 0;  // elements
};

struct CheckpointMeta {
  std::string vocab_hash;
  std::int64_t step = 0;
  std::int64_t epoch = 0;
  std::int64_t step_in_epoch = 0;
  double dev_nll = 0.0;
  bool has_dev_nll = false;
};

struct Manifest {
  int format = 1;
  std::string dtype;  // "f32" | "f64"
  ModelConfig model;
  CheckpointMeta meta;
  std::int64_t optim_t = 0;
  double optim_lr = 0.0, optim_beta1 = 0.0, optim_beta2 = 0.0, optim_eps = 0.0,
         optim_weight_decay = 0.0;
  int optim_warmup_steps = 0;
  std::vector<TensorRecord> params;
  std::vector<TensorRecord> optim;
};

void write_manifest(const std::string& path, const Manifest& m);
Manifest read_manifest(const std::string& path);

/// Scalar kind of an existing checkpoint without loading the tensors.
std::string peek_checkpoint_dtype(const std::string& dir);

void write_blob(const std::string& path, const void* data, std::size_t bytes);
std::vector<std::byte> read_blob(const std::string& path);

void ensure_directory(const std::string& dir);

}  // namespace xdial
