// Regenerates the calibrated values stored under tests/fixtures.
#include <CLI11.hpp>
#include <json.hpp>

#include <fstream>
#include <iostream>
#include <numeric>

#include "wudi/synth.hpp"

int main(int argc, char** argv)
{
    CLI::App app{"Write calibration fixtures"};
    std::string dir = "tests/fixtures";
    std::uint64_t first = 1000;
    std::size_t count = 20;
    app.add_option("--dir", dir, "output directory")->capture_default_str();
    app.add_option("--first-seed", first, "first calibration seed")->capture_default_str();
    app.add_option("--count", count, "number of calibration seeds")->capture_default_str();
    CLI11_PARSE(app, argc, argv);

    const wudi::synth::FixtureOptions opts;
    std::vector<std::uint64_t> seeds(count);
    std::iota(seeds.begin(), seeds.end(), first);

    std::vector<double> drift;
    for (std::uint64_t s : seeds) {
        drift.push_back(wudi::synth::study_seed(s, opts).consistency.delta_direction);
        std::cerr << "seed " << s << " delta_direction " << drift.back() << "\n";
    }
    const double threshold = wudi::synth::percentile(drift, 0.95);

    nlohmann::json j = {
        {"schema", 1},
        {"statistic", "p95 of per-seed delta_direction of layer-2 inputs"},
        {"threshold", threshold},
        {"calibration_seeds", seeds},
        {"delta_direction", drift},
        {"dims", {opts.dims.input, opts.dims.hidden, opts.dims.output}},
        {"samples", opts.samples},
        {"iterations", opts.finetune.iterations()},
        {"learning_rate", opts.finetune.learning_rates.front()},
        {"minor_scale", opts.minor_scale}};
    const std::string path = dir + "/lemma1_threshold.json";
    std::ofstream f(path);
    if (!f) {
        std::cerr << "cannot write " << path << "\n";
        return 1;
    }
    f << j.dump(2) << "\n";
    std::cerr << "wrote " << path << " (threshold " << threshold << ")\n";
    return 0;
}
