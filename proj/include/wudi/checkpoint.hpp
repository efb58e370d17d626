#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "wudi/tensor.hpp"

namespace wudi {

enum class DType { F16, BF16, F32, F64 };

std::string_view dtype_name(DType dtype);
DType parse_dtype(std::string_view name);
std::size_t dtype_size(DType dtype);

/// f64 -> storage dtype (round to nearest even) -> raw little-endian bits.
std::uint16_t to_f16_bits(double value);
std::uint16_t to_bf16_bits(double value);
double from_f16_bits(std::uint16_t bits);
double from_bf16_bits(std::uint16_t bits);

/// A dense tensor held as f64 for computation. `dtype` is the on-disk type it
/// was read from and will be written back as.
struct Tensor {
    DType dtype = DType::F32;
    std::vector<std::int64_t> shape;
    std::vector<double> values;

    std::size_t rank() const { return shape.size(); }
    std::size_t numel() const;

    /// Rank-2 view as a matrix copy. Throws DimensionError for other ranks.
    MatrixXd matrix() const;

    static Tensor from_matrix(const MatrixXd& m, DType dtype);
};

/// Name -> tensor, iterated in lexicographic name order.
struct Checkpoint {
    std::map<std::string, Tensor> tensors;
    std::map<std::string, std::string> metadata;

    const Tensor& at(const std::string& name) const;
    bool contains(const std::string& name) const { return tensors.count(name) != 0; }
};

Checkpoint load_checkpoint(const std::filesystem::path& path);
Checkpoint parse_checkpoint(std::string_view bytes);

/// Rounds each tensor to its recorded dtype. Refuses non-finite values,
/// including finite f64 values that overflow the target dtype.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
std::string serialize_checkpoint(const Checkpoint& ckpt);

/// The values a tensor would hold after a save/load cycle.
Tensor round_to_dtype(const Tensor& tensor);

struct ExpertCompatibility {
    std::vector<std::string> missing;  // in pretrained, absent from expert
    std::vector<std::string> extra;    // in expert, absent from pretrained
    std::vector<std::string> shape_mismatch;

    bool compatible() const { return missing.empty() && extra.empty() && shape_mismatch.empty(); }
};

struct CompatibilityReport {
    std::vector<ExpertCompatibility> experts;

    bool compatible() const;
    std::string describe() const;
};

CompatibilityReport validate_compatible(const Checkpoint& pretrained,
                                        const std::vector<Checkpoint>& experts);

struct RemapRule {
    std::string pattern;  // ECMAScript regex
    std::string replace;
};

struct Manifest {
    std::filesystem::path pretrained_path;
    std::vector<std::filesystem::path> expert_paths;
    bool lora_mode = false;
    std::vector<RemapRule> name_remap;
};

/// Parses {"pretrained": path, "experts": [path...], "lora": bool, "name_remap": [...]}.
/// Relative paths resolve against `base_dir`.
Manifest parse_manifest(std::string_view json_text, const std::filesystem::path& base_dir = {});
Manifest load_manifest(const std::filesystem::path& path);

/// Renames tensors by applying each rule in order to every name.
Checkpoint apply_remap(Checkpoint ckpt, const std::vector<RemapRule>& rules);

}  // namespace wudi
