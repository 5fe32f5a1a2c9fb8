#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "chatnmt/params.hpp"

namespace chatnmt {

/// One stored tensor from a checkpoint file.
struct TensorEntry {
    std::string name;
    std::vector<int> shape;
    std::vector<double> data;
};

/// In-memory image of a checkpoint: an opaque JSON metadata string (model
/// configuration, training stage, step counter — interpreted by the model
/// layer) plus named tensors.
///
/// On-disk layout, all integers little-endian:
///   magic   8 bytes  "CNMTCKPT"
///   version u32      currently 1
///   meta    u64 byte length, then that many bytes of UTF-8 JSON
///   count   u64      number of tensors, each:
///     name  u32 byte length + bytes
///     dtype u8       0 = float64
///     rank  u32, then rank * u32 extents
///     data  product(extents) * 8 bytes, IEEE-754 doubles, little-endian
struct CheckpointImage {
    std::string meta_json;
    std::vector<TensorEntry> tensors;

    const TensorEntry* find(const std::string& name) const;
};

void save_checkpoint(const std::string& path, const std::string& meta_json,
                     const ParamList& params);

/// Throws LoadError on missing file, bad magic, unsupported version, or a
/// truncated/corrupt body.
CheckpointImage load_checkpoint(const std::string& path);

/// Copies stored values into matching parameters. Every stored name must
/// exist in params with the same shape and vice versa, unless
/// allow_missing_in_file is set (then params absent from the file are left
/// untouched — used when a later stage adds fresh parameters). Throws
/// LoadError listing every offending path.
void restore_params(ParamList& params, const CheckpointImage& image,
                    bool allow_missing_in_file = false);

}  // namespace chatnmt
