#include "wudi/checkpoint.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <regex>
#include <sstream>

#include <Eigen/Core>
#include <json.hpp>

namespace wudi {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

using nlohmann::json;

std::string_view dtype_name(DType dtype)
{
    switch (dtype) {
    case DType::F16: return "F16";
    case DType::BF16: return "BF16";
    case DType::F32: return "F32";
    case DType::F64: return "F64";
    }
    return "?";
}

DType parse_dtype(std::string_view name)
{
    if (name == "F16") return DType::F16;
    if (name == "BF16") return DType::BF16;
    if (name == "F32") return DType::F32;
    if (name == "F64") return DType::F64;
    throw IntegrityError("unsupported dtype '" + std::string(name) + "'");
}

std::size_t dtype_size(DType dtype)
{
    switch (dtype) {
    case DType::F16:
    case DType::BF16: return 2;
    case DType::F32: return 4;
    case DType::F64: return 8;
    }
    return 0;
}

std::uint16_t to_f16_bits(double value)
{
    return Eigen::numext::bit_cast<std::uint16_t>(Eigen::half(static_cast<float>(value)));
}

std::uint16_t to_bf16_bits(double value)
{
    return Eigen::numext::bit_cast<std::uint16_t>(Eigen::bfloat16(static_cast<float>(value)));
}

double from_f16_bits(std::uint16_t bits)
{
    return static_cast<float>(Eigen::numext::bit_cast<Eigen::half>(bits));
}

double from_bf16_bits(std::uint16_t bits)
{
    return static_cast<float>(Eigen::numext::bit_cast<Eigen::bfloat16>(bits));
}

std::size_t Tensor::numel() const
{
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                           [](std::size_t acc, std::int64_t d) { return acc * static_cast<std::size_t>(d); });
}

MatrixXd Tensor::matrix() const
{
    if (shape.size() != 2) {
        throw DimensionError("tensor of rank " + std::to_string(shape.size()) +
                             " is not a matrix");
    }
    return Eigen::Map<const MatrixXd>(values.data(), shape[0], shape[1]);
}

Tensor Tensor::from_matrix(const MatrixXd& m, DType dtype)
{
    Tensor t;
    t.dtype = dtype;
    t.shape = {m.rows(), m.cols()};
    t.values.assign(m.data(), m.data() + m.size());
    return t;
}

const Tensor& Checkpoint::at(const std::string& name) const
{
    auto it = tensors.find(name);
    if (it == tensors.end()) {
        throw IntegrityError("checkpoint has no tensor '" + name + "'");
    }
    return it->second;
}

namespace {

template <typename T>
T read_le(const char* p)
{
    T v;
    std::memcpy(&v, p, sizeof(T));
    return v;
}

double decode_value(DType dtype, const char* p)
{
    switch (dtype) {
    case DType::F16: return from_f16_bits(read_le<std::uint16_t>(p));
    case DType::BF16: return from_bf16_bits(read_le<std::uint16_t>(p));
    case DType::F32: return read_le<float>(p);
    case DType::F64: return read_le<double>(p);
    }
    return 0.0;
}

void encode_value(DType dtype, double v, std::string& out)
{
    auto put = [&out](const auto& x) {
        char buf[sizeof(x)];
        std::memcpy(buf, &x, sizeof(x));
        out.append(buf, sizeof(x));
    };
    switch (dtype) {
    case DType::F16: put(to_f16_bits(v)); break;
    case DType::BF16: put(to_bf16_bits(v)); break;
    case DType::F32: put(static_cast<float>(v)); break;
    case DType::F64: put(v); break;
    }
}

double round_value(DType dtype, double v)
{
    switch (dtype) {
    case DType::F16: return from_f16_bits(to_f16_bits(v));
    case DType::BF16: return from_bf16_bits(to_bf16_bits(v));
    case DType::F32: return static_cast<float>(v);
    case DType::F64: return v;
    }
    return v;
}

}  // namespace

Tensor round_to_dtype(const Tensor& tensor)
{
    Tensor out = tensor;
    for (double& v : out.values) {
        v = round_value(out.dtype, v);
    }
    return out;
}

Checkpoint parse_checkpoint(std::string_view bytes)
{
    if (bytes.size() < 8) {
        throw ParseError("file too short for header length", 0);
    }
    const auto header_len = read_le<std::uint64_t>(bytes.data());
    if (header_len > bytes.size() - 8) {
        throw ParseError("header length " + std::to_string(header_len) + " exceeds file size", 0);
    }

    json header;
    try {
        header = json::parse(bytes.substr(8, header_len));
    } catch (const json::parse_error& e) {
        throw ParseError(std::string("invalid header JSON: ") + e.what(), 8 + e.byte);
    }
    if (!header.is_object()) {
        throw ParseError("header is not a JSON object", 8);
    }

    const std::string_view data = bytes.substr(8 + header_len);
    Checkpoint ckpt;
    std::vector<std::pair<std::uint64_t, std::uint64_t>> spans;

    for (const auto& [name, entry] : header.items()) {
        if (name == "__metadata__") {
            if (!entry.is_object()) {
                throw ParseError("__metadata__ is not an object", 8);
            }
            for (const auto& [k, v] : entry.items()) {
                if (!v.is_string()) {
                    throw ParseError("metadata value for '" + k + "' is not a string", 8);
                }
                ckpt.metadata[k] = v.get<std::string>();
            }
            continue;
        }
        if (!entry.is_object() || !entry.contains("dtype") || !entry.contains("shape") ||
            !entry.contains("data_offsets")) {
            throw IntegrityError("tensor '" + name + "': header entry lacks dtype/shape/data_offsets");
        }
        Tensor t;
        try {
            t.dtype = parse_dtype(entry.at("dtype").get<std::string>());
            t.shape = entry.at("shape").get<std::vector<std::int64_t>>();
        } catch (const json::exception& e) {
            throw IntegrityError("tensor '" + name + "': " + e.what());
        } catch (const IntegrityError& e) {
            throw IntegrityError("tensor '" + name + "': " + e.what());
        }
        for (auto d : t.shape) {
            if (d < 0) {
                throw IntegrityError("tensor '" + name + "': negative dimension");
            }
        }
        const auto offsets = entry.at("data_offsets").get<std::vector<std::uint64_t>>();
        if (offsets.size() != 2 || offsets[0] > offsets[1]) {
            throw IntegrityError("tensor '" + name + "': malformed data_offsets");
        }
        const std::size_t elem = dtype_size(t.dtype);
        const std::size_t n = t.numel();
        if (offsets[1] - offsets[0] != n * elem) {
            throw IntegrityError("tensor '" + name + "': byte span " +
                                 std::to_string(offsets[1] - offsets[0]) + " does not match shape (" +
                                 std::to_string(n * elem) + " bytes expected)");
        }
        if (offsets[1] > data.size()) {
            throw IntegrityError("tensor '" + name + "': data section truncated (needs " +
                                 std::to_string(offsets[1]) + " bytes, have " +
                                 std::to_string(data.size()) + ")");
        }
        t.values.resize(n);
        const char* base = data.data() + offsets[0];
        for (std::size_t i = 0; i < n; ++i) {
            t.values[i] = decode_value(t.dtype, base + i * elem);
        }
        spans.emplace_back(offsets[0], offsets[1]);
        ckpt.tensors.emplace(name, std::move(t));
    }

    std::sort(spans.begin(), spans.end());
    for (std::size_t i = 1; i < spans.size(); ++i) {
        if (spans[i].first < spans[i - 1].second) {
            throw IntegrityError("tensor byte ranges overlap");
        }
    }
    return ckpt;
}

Checkpoint load_checkpoint(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw Error("cannot open checkpoint '" + path.string() + "'");
    }
    std::ostringstream buf;
    buf << in.rdbuf();
    const std::string bytes = buf.str();
    return parse_checkpoint(bytes);
}

std::string serialize_checkpoint(const Checkpoint& ckpt)
{
    json header = json::object();
    if (!ckpt.metadata.empty()) {
        header["__metadata__"] = ckpt.metadata;
    }

    std::string data;
    for (const auto& [name, t] : ckpt.tensors) {
        if (t.values.size() != t.numel()) {
            throw IntegrityError("tensor '" + name + "': value count does not match shape");
        }
        const std::size_t begin = data.size();
        for (std::size_t i = 0; i < t.values.size(); ++i) {
            const double v = t.values[i];
            if (!std::isfinite(v) || !std::isfinite(round_value(t.dtype, v))) {
                throw NonFiniteError("refusing to write non-finite value in tensor '" + name +
                                         "' at flat index " + std::to_string(i),
                                     name, i);
            }
            encode_value(t.dtype, v, data);
        }
        header[name] = {{"dtype", dtype_name(t.dtype)},
                        {"shape", t.shape},
                        {"data_offsets", {begin, data.size()}}};
    }

    std::string text = header.dump();
    text.append((8 - text.size() % 8) % 8, ' ');

    std::string out;
    out.reserve(8 + text.size() + data.size());
    const std::uint64_t len = text.size();
    out.append(reinterpret_cast<const char*>(&len), sizeof(len));
    out += text;
    out += data;
    return out;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path)
{
    const std::string bytes = serialize_checkpoint(ckpt);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw Error("cannot open '" + path.string() + "' for writing");
    }
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw Error("failed writing '" + path.string() + "'");
    }
}

bool CompatibilityReport::compatible() const
{
    return std::all_of(experts.begin(), experts.end(),
                       [](const ExpertCompatibility& e) { return e.compatible(); });
}

std::string CompatibilityReport::describe() const
{
    std::ostringstream os;
    for (std::size_t i = 0; i < experts.size(); ++i) {
        const auto& e = experts[i];
        if (e.compatible()) continue;
        os << "expert " << i << ":";
        for (const auto& n : e.missing) os << " missing=" << n;
        for (const auto& n : e.extra) os << " extra=" << n;
        for (const auto& n : e.shape_mismatch) os << " shape=" << n;
        os << "\n";
    }
    return os.str();
}

CompatibilityReport validate_compatible(const Checkpoint& pretrained,
                                        const std::vector<Checkpoint>& experts)
{
    CompatibilityReport report;
    for (const auto& expert : experts) {
        ExpertCompatibility ec;
        for (const auto& [name, t] : pretrained.tensors) {
            auto it = expert.tensors.find(name);
            if (it == expert.tensors.end()) {
                ec.missing.push_back(name);
            } else if (it->second.shape != t.shape) {
                ec.shape_mismatch.push_back(name);
            }
        }
        for (const auto& [name, t] : expert.tensors) {
            if (!pretrained.contains(name)) {
                ec.extra.push_back(name);
            }
        }
        report.experts.push_back(std::move(ec));
    }
    return report;
}

Manifest parse_manifest(std::string_view json_text, const std::filesystem::path& base_dir)
{
    json doc;
    try {
        doc = json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw ParseError(std::string("invalid manifest JSON: ") + e.what(), e.byte);
    }
    auto resolve = [&](const std::string& p) {
        std::filesystem::path path(p);
        return path.is_relative() && !base_dir.empty() ? base_dir / path : path;
    };

    Manifest m;
    try {
        m.pretrained_path = resolve(doc.at("pretrained").get<std::string>());
        for (const auto& e : doc.at("experts")) {
            m.expert_paths.push_back(resolve(e.get<std::string>()));
        }
        m.lora_mode = doc.value("lora", false);
        if (doc.contains("name_remap")) {
            for (const auto& r : doc.at("name_remap")) {
                m.name_remap.push_back({r.at("pattern").get<std::string>(),
                                        r.at("replace").get<std::string>()});
            }
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("manifest: ") + e.what());
    }
    if (m.expert_paths.empty()) {
        throw ConfigError("manifest: experts list is empty");
    }
    return m;
}

Manifest load_manifest(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) {
        throw Error("cannot open manifest '" + path.string() + "'");
    }
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_manifest(buf.str(), path.parent_path());
}

Checkpoint apply_remap(Checkpoint ckpt, const std::vector<RemapRule>& rules)
{
    if (rules.empty()) return ckpt;
    std::vector<std::pair<std::regex, std::string>> compiled;
    for (const auto& r : rules) {
        compiled.emplace_back(std::regex(r.pattern), r.replace);
    }
    Checkpoint out;
    out.metadata = std::move(ckpt.metadata);
    for (auto& [name, t] : ckpt.tensors) {
        std::string renamed = name;
        for (const auto& [re, rep] : compiled) {
            renamed = std::regex_replace(renamed, re, rep);
        }
        if (!out.tensors.emplace(renamed, std::move(t)).second) {
            throw IntegrityError("name remap maps two tensors onto '" + renamed + "'");
        }
    }
    return out;
}

}  // namespace wudi
