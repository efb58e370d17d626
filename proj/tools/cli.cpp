#include "cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <regex>
#include <sstream>

#include "wudi/checkpoint.hpp"
#include "wudi/diagnostics.hpp"
#include "wudi/errors.hpp"
#include "wudi/report.hpp"
#include "wudi/solver.hpp"
#include "wudi/synth.hpp"
#include "wudi/task_vector.hpp"

namespace wudi::cli {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

// Flag problems found before any file is touched.
class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class Format { Json, Text };

struct MergeFlags {
    std::string method = "wudi-gd";
    std::size_t steps = 300;
    double lr = 1e-5;
    double epsilon = 1.0;
    double lambda = 0.3;
    double omega = 0.0;
    bool unbalanced = false;
    std::string nonlinear = "pretrained";
    std::vector<std::string> include;
    std::vector<std::string> exclude;
    std::size_t threads = 0;  // 0: WUDI_THREADS or 1
};

struct InputFlags {
    std::string manifest;
    std::string pretrained;
    std::vector<std::string> experts;
    bool lora = false;
};

struct OutputFlags {
    std::string out;
    std::string report;
    std::string format = "json";
    bool no_timing = false;
};

std::size_t resolve_threads(std::size_t flag)
{
    if (flag > 0) return flag;
    const char* env = std::getenv("WUDI_THREADS");
    if (env == nullptr || *env == '\0') return 1;
    try {
        std::size_t used = 0;
        const long long v = std::stoll(env, &used);
        if (used != std::string(env).size() || v < 1) throw std::invalid_argument("range");
        return static_cast<std::size_t>(v);
    } catch (const std::exception&) {
        throw UsageError(std::string("WUDI_THREADS must be a positive integer, got '") + env +
                         "'");
    }
}

Format parse_format(const std::string& name)
{
    if (name == "json") return Format::Json;
    if (name == "text") return Format::Text;
    throw UsageError("--format must be json or text");
}

MergeConfig build_config(const MergeFlags& f)
{
    MergeConfig cfg;
    try {
        cfg.method = parse_merge_method(f.method);
        cfg.nonlinear_policy = parse_nonlinear_policy(f.nonlinear);
        cfg.steps = f.steps;
        cfg.learning_rate = f.lr;
        cfg.epsilon = f.epsilon;
        cfg.lambda = f.lambda;
        cfg.omega = f.omega;
        cfg.balanced = !f.unbalanced;
        if (!f.include.empty()) cfg.include_patterns = f.include;
        if (!f.exclude.empty()) cfg.exclude_patterns = f.exclude;
        cfg.threads = resolve_threads(f.threads);
        cfg.validate();
    } catch (const ConfigError& e) {
        throw UsageError(e.what());
    }
    return cfg;
}

void add_merge_flags(CLI::App* app, MergeFlags& f)
{
    app->add_option("--method", f.method, "wudi-gd | wudi-cfs | average | task-arith")
        ->capture_default_str();
    app->add_option("--steps", f.steps, "Adam steps per layer")->capture_default_str();
    app->add_option("--lr", f.lr, "Adam learning rate")->capture_default_str();
    app->add_option("--epsilon", f.epsilon, "scale of the merged task vector")
        ->capture_default_str();
    app->add_option("--lambda", f.lambda, "task-arithmetic coefficient")->capture_default_str();
    app->add_option("--omega", f.omega, "ridge term of the closed-form solve")
        ->capture_default_str();
    app->add_flag("--unbalanced", f.unbalanced, "weight every task equally");
    app->add_option("--nonlinear-policy", f.nonlinear, "pretrained | mean | sum")
        ->capture_default_str();
    app->add_option("--include", f.include, "glob of tensors to merge (repeatable)");
    app->add_option("--exclude", f.exclude, "glob of tensors to keep out (repeatable)");
    app->add_option("--threads", f.threads, "layer-solve workers (default: WUDI_THREADS or 1)");
}

void add_input_flags(CLI::App* app, InputFlags& f)
{
    app->add_option("--manifest", f.manifest, "JSON manifest with pretrained and expert paths");
    app->add_option("--pretrained", f.pretrained, "pretrained checkpoint");
    app->add_option("--expert", f.experts, "fine-tuned checkpoint (repeatable)");
    app->add_flag("--lora", f.lora, "experts hold low-rank adapter pairs");
}

void require_inputs(const InputFlags& f)
{
    const bool inline_paths = !f.pretrained.empty() || !f.experts.empty();
    if (!f.manifest.empty() && inline_paths) {
        throw UsageError("use either --manifest or --pretrained/--expert, not both");
    }
    if (f.manifest.empty() && (f.pretrained.empty() || f.experts.empty())) {
        throw UsageError("need --manifest, or --pretrained with at least one --expert");
    }
}

struct Inputs {
    Checkpoint pretrained;
    std::vector<Checkpoint> experts;
    bool lora = false;
};

Inputs load_inputs(const InputFlags& f, std::ostream& err)
{
    Manifest m;
    if (!f.manifest.empty()) {
        m = load_manifest(f.manifest);
        m.lora_mode = m.lora_mode || f.lora;
    } else {
        m.pretrained_path = f.pretrained;
        for (const auto& e : f.experts) m.expert_paths.emplace_back(e);
        m.lora_mode = f.lora;
    }
    Inputs in;
    in.lora = m.lora_mode;
    err << "[wudi] loading pretrained " << m.pretrained_path.string() << "\n";
    in.pretrained = apply_remap(load_checkpoint(m.pretrained_path), m.name_remap);
    for (const auto& p : m.expert_paths) {
        err << "[wudi] loading expert " << p.string() << "\n";
        in.experts.push_back(apply_remap(load_checkpoint(p), m.name_remap));
    }
    return in;
}

std::vector<TaskVector> task_vectors(const Inputs& in, const LayerClassification& cls)
{
    std::vector<TaskVector> taus;
    for (std::size_t i = 0; i < in.experts.size(); ++i) {
        taus.push_back(in.lora ? extract_lora_task_vector(in.pretrained, in.experts[i], cls, i)
                               : extract_task_vector(in.pretrained, in.experts[i], cls, i));
    }
    return taus;
}

void write_text(const std::string& path, const std::string& text)
{
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot open '" + path + "' for writing");
    f << text;
    if (!f) throw Error("failed writing '" + path + "'");
}

std::string read_text(const std::string& path)
{
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("cannot open '" + path + "'");
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

// Reports are written in one piece so output never interleaves.
void emit(std::ostream& out, const json& j)
{
    out << j.dump(2) << "\n";
    out.flush();
}

std::string merge_text(const MergeReport& r)
{
    std::ostringstream s;
    s << "method " << r.method << ", " << r.experts << " experts, " << r.layers.size()
      << " layers merged, " << r.excluded.size() << " excluded\n";
    s << std::left << std::setw(40) << "layer" << std::setw(12) << "shape" << std::setw(16)
      << "initial_loss" << std::setw(16) << "final_loss"
      << "tau_m_norm\n";
    for (const auto& l : r.layers) {
        std::ostringstream shape;
        shape << l.rows << "x" << l.cols;
        s << std::left << std::setw(40) << l.name << std::setw(12) << shape.str()
          << std::setw(16) << l.initial_loss << std::setw(16) << l.final_loss << l.tau_m_norm
          << "\n";
    }
    for (const auto& [name, reason] : r.excluded) s << "excluded " << name << " (" << reason << ")\n";
    return s.str();
}

// ---------------------------------------------------------------------------

int cmd_merge(const InputFlags& in_flags, const MergeFlags& mf, const OutputFlags& of,
              std::ostream& out, std::ostream& err)
{
    require_inputs(in_flags);
    const MergeConfig cfg = build_config(mf);
    const Format format = parse_format(of.format);
    if (of.out.empty()) throw UsageError("merge needs --out");

    const Inputs in = load_inputs(in_flags, err);
    MergeResult result;
    if (in.lora) {
        const LayerClassification cls = classify_layers(in.pretrained, cfg);
        err << "[wudi] merging " << cls.eligible.size() << " layers from " << in.experts.size()
            << " adapters\n";
        result = merge_task_vectors(in.pretrained, cls, task_vectors(in, cls), cfg);
    } else {
        err << "[wudi] merging " << in.experts.size() << " experts with "
            << merge_method_name(cfg.method) << " on " << cfg.threads << " thread(s)\n";
        result = merge(in.pretrained, in.experts, cfg);
    }
    save_checkpoint(result.merged, of.out);
    err << "[wudi] wrote " << of.out << "\n";

    const json report = to_json(result.report, !of.no_timing);
    if (!of.report.empty()) {
        write_text(of.report, report.dump(2) + "\n");
        err << "[wudi] wrote " << of.report << "\n";
    }
    if (format == Format::Text) {
        out << merge_text(result.report);
    } else if (of.report.empty()) {
        emit(out, report);
    }
    return kExitOk;
}

int cmd_extract(const InputFlags& in_flags, const MergeFlags& mf, const std::string& out_path,
                const std::string& dtype_name_flag, std::ostream& out, std::ostream& err)
{
    require_inputs(in_flags);
    const MergeConfig cfg = build_config(mf);
    DType dtype{};
    try {
        std::string upper = dtype_name_flag;
        std::transform(upper.begin(), upper.end(), upper.begin(),
                       [](unsigned char c) { return static_cast<char>(std::toupper(c)); });
        dtype = parse_dtype(upper);
    } catch (const Error& e) {
        throw UsageError(e.what());
    }
    if (out_path.empty()) throw UsageError("extract needs --out");

    const Inputs in = load_inputs(in_flags, err);
    if (in.experts.size() != 1) {
        throw ConfigError("extract takes exactly one expert");
    }
    const LayerClassification cls = classify_layers(in.pretrained, cfg);
    const TaskVector tv = task_vectors(in, cls).front();

    Checkpoint dump;
    dump.metadata["content"] = "task-vector";
    json layers = json::array();
    for (const auto& [name, m] : tv.layers) {
        dump.tensors.emplace(name, Tensor::from_matrix(m, dtype));
        layers.push_back({{"name", name}, {"shape", {m.rows(), m.cols()}}, {"norm", m.norm()}});
    }
    json passthrough = json::array();
    for (const auto& [name, t] : tv.passthrough) {
        Tensor copy = t;
        copy.dtype = dtype;
        dump.tensors.emplace(name, std::move(copy));
        passthrough.push_back(name);
    }
    save_checkpoint(dump, out_path);
    err << "[wudi] wrote " << out_path << "\n";

    json excluded = json::array();
    for (const auto& [name, reason] : cls.excluded) {
        excluded.push_back({{"name", name}, {"reason", exclusion_reason_name(reason)}});
    }
    emit(out, {{"schema", kReportSchema},
               {"layers", layers},
               {"passthrough", passthrough},
               {"excluded", excluded}});
    return kExitOk;
}

// Overrides fixture defaults with any merge flag the user actually passed.
MergeConfig fixture_config(const CLI::App* app, const MergeFlags& f, MergeMethod method)
{
    MergeConfig cfg = synth::fixture_merge_config(method);
    try {
        if (app->count("--steps") > 0) cfg.steps = f.steps;
        if (app->count("--lr") > 0) cfg.learning_rate = f.lr;
        if (app->count("--omega") > 0) cfg.omega = f.omega;
        if (app->count("--lambda") > 0) cfg.lambda = f.lambda;
        if (app->count("--epsilon") > 0) cfg.epsilon = f.epsilon;
        cfg.balanced = !f.unbalanced;
        cfg.threads = resolve_threads(f.threads);
        cfg.validate();
    } catch (const ConfigError& e) {
        throw UsageError(e.what());
    }
    return cfg;
}

std::vector<VectorXd> parse_vectors(const json& rows)
{
    std::vector<VectorXd> v;
    for (const auto& r : rows) {
        const auto values = r.get<std::vector<double>>();
        v.emplace_back(Eigen::Map<const VectorXd>(values.data(),
                                                  static_cast<Eigen::Index>(values.size())));
    }
    return v;
}

LayerParams delta_layers(const Checkpoint& from, const Checkpoint& to,
                         const std::vector<std::string>& names)
{
    LayerParams d;
    for (const auto& n : names) {
        const MatrixXd a = from.at(n).matrix();
        const MatrixXd b = to.at(n).matrix();
        require_same_shape(a, b, ("tensor '" + n + "'").c_str());
        d.emplace(n, b - a);
    }
    return d;
}

struct DiagnoseFlags {
    std::optional<std::uint64_t> fixture_seed;
    std::size_t tasks = 4;
    std::string merged;
    std::string samples;
    std::string trace;
};

int cmd_diagnose(const CLI::App* app, const DiagnoseFlags& df, const InputFlags& in_flags,
                 const MergeFlags& mf, std::ostream& out, std::ostream& err)
{
    const bool file_mode = !df.merged.empty() || !df.samples.empty();
    if (!df.fixture_seed && !file_mode && df.trace.empty()) {
        throw UsageError("diagnose needs --fixture-seed, --merged with --samples, or --trace");
    }
    if (df.fixture_seed && file_mode) {
        throw UsageError("--fixture-seed cannot be combined with --merged/--samples");
    }
    if (file_mode) {
        if (df.merged.empty() || df.samples.empty()) {
            throw UsageError("file mode needs both --merged and --samples");
        }
        require_inputs(in_flags);
    }
    MergeConfig cfg;
    if (df.fixture_seed) {
        if (df.tasks < 1) throw UsageError("--tasks must be >= 1");
        try {
            cfg = fixture_config(app, mf, parse_merge_method(mf.method));
        } catch (const ConfigError& e) {
            throw UsageError(e.what());
        }
    }

    json j = {{"schema", kReportSchema}};
    if (df.fixture_seed) {
        synth::FixtureOptions opts;
        opts.tasks = df.tasks;
        err << "[wudi] building fixture seed " << *df.fixture_seed << "\n";
        const synth::MergeFixture fx = synth::make_merge_fixture(*df.fixture_seed, opts);
        const MergeResult r = merge(fx.pretrained, fx.experts, cfg);
        json consistency = json::array();
        json prop1 = json::array();
        for (std::size_t i = 0; i < fx.traces.size(); ++i) {
            consistency.push_back(to_json(synth::verify_lemma1(fx.traces[i])));
            prop1.push_back(to_json(synth::verify_prop1(fx.traces[i], *df.fixture_seed + i)));
        }
        j["fixture_seed"] = *df.fixture_seed;
        j["method"] = merge_method_name(cfg.method);
        j["interference"] = to_json(synth::fixture_interference(fx, r.merged));
        j["consistency"] = consistency;
        j["subspace"] = prop1;
    }
    if (file_mode) {
        const json samples = json::parse(read_text(df.samples));
        const auto order = samples.at("layers").get<std::vector<std::string>>();
        std::vector<std::vector<VectorXd>> per_task;
        for (const auto& t : samples.at("tasks")) per_task.push_back(parse_vectors(t));

        const Inputs in = load_inputs(in_flags, err);
        if (per_task.size() != in.experts.size()) {
            throw ConfigError("samples file has " + std::to_string(per_task.size()) +
                              " tasks but " + std::to_string(in.experts.size()) +
                              " experts were given");
        }
        const Checkpoint merged = load_checkpoint(df.merged);
        LayerParams theta;
        for (const auto& n : order) theta.emplace(n, in.pretrained.at(n).matrix());
        std::vector<LayerParams> taus;
        for (const auto& e : in.experts) taus.push_back(delta_layers(in.pretrained, e, order));
        j["interference"] =
            to_json(relative_interference(relu_mlp_evaluator(order), theta,
                                          delta_layers(in.pretrained, merged, order), taus,
                                          per_task));
        j["layers"] = order;
    }
    if (!df.trace.empty()) {
        std::ifstream f(df.trace);
        if (!f) throw Error("cannot open '" + df.trace + "'");
        const std::vector<MatrixXd> inputs = synth::read_trace_jsonl(f);
        if (inputs.size() < 2) throw DegenerateError("trace needs at least two iterations");
        auto rows = [](const MatrixXd& m) {
            std::vector<VectorXd> v;
            for (Eigen::Index r = 0; r < m.rows(); ++r) v.emplace_back(m.row(r).transpose());
            return v;
        };
        ConsistencyReport c = input_consistency(rows(inputs.front()), rows(inputs.back()));
        c.layer = synth::kLayer2;
        j["trace_consistency"] = to_json(c);
    }
    emit(out, j);
    return kExitOk;
}

struct AblateFlags {
    std::uint64_t fixture_seed = 0;
    std::size_t seeds = 1;
    std::vector<double> fractions{0.25, 0.5, 0.75};
    std::uint64_t ablation_seed = 0;
};

int cmd_ablate(const CLI::App* app, const AblateFlags& af, const MergeFlags& mf,
               std::ostream& out, std::ostream& err)
{
    MergeMethod method{};
    try {
        method = parse_merge_method(mf.method);
    } catch (const ConfigError& e) {
        throw UsageError(e.what());
    }
    if (method != MergeMethod::WudiGd && method != MergeMethod::WudiCfs) {
        throw UsageError("ablate runs wudi-gd or wudi-cfs");
    }
    if (af.seeds < 1) throw UsageError("--seeds must be >= 1");
    for (double f : af.fractions) {
        if (!(f > 0.0 && f <= 1.0)) throw UsageError("row-subset fractions must lie in (0, 1]");
    }
    const MergeConfig base = fixture_config(app, mf, method);

    struct Variant {
        std::string name;
        MergeConfig cfg;
    };
    std::vector<Variant> variants;
    {
        MergeConfig c = base;
        c.balanced = true;
        variants.push_back({"balanced", c});
        c.balanced = false;
        variants.push_back({"unbalanced", c});
        c = base;
        c.ablate = true;
        c.ablate_seed = af.ablation_seed;
        c.ablate_random_gaussian = true;
        variants.push_back({"random_gaussian", c});
        c.ablate_random_gaussian = false;
        for (double f : af.fractions) {
            c.ablate_fraction = f;
            std::ostringstream name;
            name << "row_subset@" << f;
            variants.push_back({name.str(), c});
        }
        variants.push_back({"task_arithmetic", synth::fixture_merge_config(MergeMethod::TaskArithmetic)});
        variants.push_back({"average", synth::fixture_merge_config(MergeMethod::Average)});
    }

    std::vector<std::vector<double>> finals(variants.size());
    std::vector<std::uint64_t> seeds;
    for (std::size_t s = 0; s < af.seeds; ++s) {
        const std::uint64_t seed = af.fixture_seed + s;
        seeds.push_back(seed);
        err << "[wudi] fixture seed " << seed << "\n";
        const synth::MergeFixture fx = synth::make_merge_fixture(seed);
        for (std::size_t v = 0; v < variants.size(); ++v) {
            const MergeResult r = merge(fx.pretrained, fx.experts, variants[v].cfg);
            const InterferenceReport rep = synth::fixture_interference(fx, r.merged);
            finals[v].push_back(rep.mean_at(rep.depths() - 1));
        }
    }
    json list = json::array();
    for (std::size_t v = 0; v < variants.size(); ++v) {
        double mean = 0.0;
        for (double x : finals[v]) mean += x;
        mean /= static_cast<double>(finals[v].size());
        list.push_back({{"variant", variants[v].name},
                        {"final_interference", finals[v]},
                        {"mean_final_interference", mean}});
    }
    emit(out, {{"schema", kReportSchema},
               {"method", merge_method_name(method)},
               {"seeds", seeds},
               {"variants", list}});
    return kExitOk;
}

int cmd_verify(const VerifyOptions& opts, const std::string& threshold_file,
               const std::string& format_name, std::ostream& out, std::ostream& err)
{
    const Format format = parse_format(format_name);
    if (opts.seeds < 1) throw UsageError("--seeds must be >= 1");
    VerifyOptions o = opts;
    if (!threshold_file.empty()) {
        const json t = json::parse(read_text(threshold_file));
        o.lemma1_threshold = t.at("threshold").get<double>();
    }
    const std::vector<CheckResult> results = run_verify_suite(o, err);
    bool all = true;
    for (const auto& r : results) all = all && r.passed;
    if (format == Format::Json) {
        json list = json::array();
        for (const auto& r : results) {
            list.push_back({{"name", r.name}, {"passed", r.passed}, {"detail", r.detail}});
        }
        emit(out, {{"schema", kReportSchema}, {"checks", list}, {"all_passed", all}});
    } else {
        std::ostringstream s;
        s << std::left << std::setw(30) << "check" << std::setw(8) << "result"
          << "detail\n";
        for (const auto& r : results) {
            s << std::left << std::setw(30) << r.name << std::setw(8)
              << (r.passed ? "PASS" : "FAIL") << r.detail << "\n";
        }
        s << (all ? "all checks passed" : "some checks failed") << "\n";
        out << s.str();
    }
    return all ? kExitOk : kExitFailure;
}

// ---------------------------------------------------------------------------

std::string module_of(const std::exception& e)
{
    if (dynamic_cast<const SingularityError*>(&e) || dynamic_cast<const DivergenceError*>(&e)) {
        return "wudi-solver";
    }
    if (dynamic_cast<const ParseError*>(&e) || dynamic_cast<const IntegrityError*>(&e) ||
        dynamic_cast<const NonFiniteError*>(&e)) {
        return "checkpoint-io";
    }
    if (dynamic_cast<const DegenerateError*>(&e)) return "diagnostics";
    if (dynamic_cast<const DimensionError*>(&e)) return "tensor-core";
    if (dynamic_cast<const nlohmann::json::exception*>(&e)) return "cli";
    return "cli";
}

void report_failure(const std::exception& e, std::ostream& err)
{
    const std::string what = e.what();
    json j = {{"module", module_of(e)}, {"cause", what}};
    std::smatch m;
    static const std::regex layer_re("layer '([^']+)'");
    if (std::regex_search(what, m, layer_re)) {
        j["layer"] = m[1].str();
    } else {
        j["layer"] = nullptr;
    }
    if (dynamic_cast<const SingularityError*>(&e) != nullptr) {
        j["hint"] = "retry with --omega 1e-6";
    }
    err << json{{"error", j}}.dump() << "\n";
    err.flush();
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err)
{
    CLI::App app{"Data-free model merging by minimizing per-layer interference"};
    app.require_subcommand(1);
    app.set_version_flag("--version", "wudi 1.0");

    InputFlags merge_in;
    MergeFlags merge_flags;
    OutputFlags merge_out;
    CLI::App* merge_cmd = app.add_subcommand("merge", "merge experts into one checkpoint");
    add_input_flags(merge_cmd, merge_in);
    add_merge_flags(merge_cmd, merge_flags);
    merge_cmd->add_option("--out", merge_out.out, "merged checkpoint path");
    merge_cmd->add_option("--report", merge_out.report, "merge report JSON path");
    merge_cmd->add_option("--format", merge_out.format, "json | text")->capture_default_str();
    merge_cmd->add_flag("--no-timing", merge_out.no_timing, "omit wall-clock fields");

    InputFlags extract_in;
    MergeFlags extract_flags;
    std::string extract_out;
    std::string extract_dtype = "f32";
    CLI::App* extract_cmd = app.add_subcommand("extract", "dump one expert's task vector");
    add_input_flags(extract_cmd, extract_in);
    extract_cmd->add_option("--include", extract_flags.include, "glob of tensors to treat as layers");
    extract_cmd->add_option("--exclude", extract_flags.exclude, "glob of tensors to pass through");
    extract_cmd->add_option("--out", extract_out, "task-vector checkpoint path");
    extract_cmd->add_option("--dtype", extract_dtype, "f16 | bf16 | f32 | f64")
        ->capture_default_str();

    DiagnoseFlags diag;
    InputFlags diag_in;
    MergeFlags diag_flags;
    CLI::App* diag_cmd = app.add_subcommand("diagnose", "interference and input-drift reports");
    diag_cmd->add_option("--fixture-seed", diag.fixture_seed, "synthetic fixture to diagnose");
    diag_cmd->add_option("--tasks", diag.tasks, "fixture task count")->capture_default_str();
    diag_cmd->add_option("--merged", diag.merged, "merged checkpoint (file mode)");
    diag_cmd->add_option("--samples", diag.samples, "per-task input samples JSON (file mode)");
    diag_cmd->add_option("--trace", diag.trace, "fine-tuning trace JSONL");
    add_input_flags(diag_cmd, diag_in);
    add_merge_flags(diag_cmd, diag_flags);

    AblateFlags abl;
    MergeFlags abl_flags;
    CLI::App* abl_cmd = app.add_subcommand("ablate", "loss-variant merges on synthetic fixtures");
    abl_cmd->add_option("--fixture-seed", abl.fixture_seed, "first fixture seed")
        ->capture_default_str();
    abl_cmd->add_option("--seeds", abl.seeds, "number of consecutive seeds")->capture_default_str();
    abl_cmd->add_option("--fractions", abl.fractions, "row-subset fractions")->delimiter(',');
    abl_cmd->add_option("--ablation-seed", abl.ablation_seed, "sampling seed")
        ->capture_default_str();
    add_merge_flags(abl_cmd, abl_flags);

    VerifyOptions vopts;
    std::string threshold_file;
    std::string verify_format = "text";
    CLI::App* verify_cmd = app.add_subcommand("verify", "run the property suite");
    verify_cmd->add_option("--seeds", vopts.seeds, "fixture seeds per statistical check")
        ->capture_default_str();
    verify_cmd->add_option("--threshold-file", threshold_file,
                           "JSON with the calibrated input-drift threshold");
    verify_cmd->add_option("--format", verify_format, "json | text")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (merge_cmd->parsed()) return cmd_merge(merge_in, merge_flags, merge_out, out, err);
        if (extract_cmd->parsed()) {
            return cmd_extract(extract_in, extract_flags, extract_out, extract_dtype, out, err);
        }
        if (diag_cmd->parsed()) return cmd_diagnose(diag_cmd, diag, diag_in, diag_flags, out, err);
        if (abl_cmd->parsed()) return cmd_ablate(abl_cmd, abl, abl_flags, out, err);
        if (verify_cmd->parsed()) {
            return cmd_verify(vopts, threshold_file, verify_format, out, err);
        }
    } catch (const UsageError& e) {
        err << "usage error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        report_failure(e, err);
        return kExitFailure;
    }
    return kExitUsage;
}

}  // namespace wudi::cli
