#include <CLI11.hpp>

#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "s4m/audio.hpp"
#include "s4m/checkpoint.hpp"
#include "s4m/config.hpp"
#include "s4m/profile.hpp"
#include "s4m/train.hpp"
#include "s4m/verify.hpp"

namespace {

namespace fs = std::filesystem;
using namespace s4m;

constexpr int exit_failure = 1;
constexpr int exit_usage = 2;

std::pair<double, double> parse_range(const std::string& text)
{
    const auto comma = text.find(',');
    if (comma == std::string::npos) {
        throw invalid_argument("--snr expects LO,HI, got '" + text + "'");
    }
    std::size_t used = 0;
    const std::string lo_s = text.substr(0, comma);
    const std::string hi_s = text.substr(comma + 1);
    const double lo = std::stod(lo_s, &used);
    if (used != lo_s.size()) {
        throw invalid_argument("--snr: bad number '" + lo_s + "'");
    }
    const double hi = std::stod(hi_s, &used);
    if (used != hi_s.size()) {
        throw invalid_argument("--snr: bad number '" + hi_s + "'");
    }
    if (lo > hi) {
        throw invalid_argument("--snr: LO must not exceed HI");
    }
    return {lo, hi};
}

s4::Mode parse_mode(const std::string& m)
{
    return m == "recurrent" ? s4::Mode::recurrent : s4::Mode::conv;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"S4M speech separation toolkit"};
    app.require_subcommand(1);

    auto* gen = app.add_subcommand("gen-data", "Synthesize a two-source mixture corpus");
    std::string gen_out;
    std::size_t gen_n = 200;
    int gen_sr = 8000;
    double gen_dur = 2.0;
    std::string gen_snr = "-5,5";
    std::uint64_t gen_seed = 1;
    gen->add_option("--out", gen_out, "Output directory")->required();
    gen->add_option("--n", gen_n, "Number of mixtures")->check(CLI::PositiveNumber);
    gen->add_option("--sr", gen_sr, "Sample rate in Hz")->check(CLI::PositiveNumber);
    gen->add_option("--dur", gen_dur, "Duration in seconds")->check(CLI::PositiveNumber);
    gen->add_option("--snr", gen_snr, "SNR range in dB as LO,HI");
    gen->add_option("--seed", gen_seed, "Corpus seed");

    auto* trn = app.add_subcommand("train", "Train a model on a corpus");
    std::string trn_config;
    std::string trn_data;
    std::string trn_ckpt;
    std::uint64_t trn_seed = 0;
    trn->add_option("--config", trn_config, "Config file (key = value)")->required()->check(CLI::ExistingFile);
    trn->add_option("--data", trn_data, "Corpus directory")->required()->check(CLI::ExistingDirectory);
    trn->add_option("--ckpt", trn_ckpt, "Checkpoint to write")->required();
    auto* seed_opt = trn->add_option("--seed", trn_seed, "Override the training seed");

    auto* sep = app.add_subcommand("separate", "Separate one mixture WAV");
    std::string sep_ckpt;
    std::string sep_in;
    std::string sep_out;
    std::string sep_mode = "conv";
    sep->add_option("--ckpt", sep_ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
    sep->add_option("--in", sep_in, "Input mixture WAV")->required()->check(CLI::ExistingFile);
    sep->add_option("--out", sep_out, "Output directory")->required();
    sep->add_option("--mode", sep_mode, "S4 execution mode")->check(CLI::IsMember({"conv", "recurrent"}));

    auto* evl = app.add_subcommand("eval", "Score a checkpoint on a corpus split");
    std::string evl_ckpt;
    std::string evl_data;
    std::string evl_report;
    std::string evl_split = "test";
    evl->add_option("--ckpt", evl_ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
    evl->add_option("--data", evl_data, "Corpus directory")->required()->check(CLI::ExistingDirectory);
    evl->add_option("--report", evl_report, "CSV report to write")->required();
    evl->add_option("--split", evl_split, "Corpus split")->check(CLI::IsMember({"train", "valid", "test", "all"}));

    auto* prof = app.add_subcommand("profile", "Parameters, MACs and CPU real-time factor");
    std::string prof_config;
    std::string prof_ckpt;
    std::size_t prof_runs = 1000;
    bool prof_backward = false;
    auto* prof_cfg_opt = prof->add_option("--config", prof_config, "Config file")->check(CLI::ExistingFile);
    auto* prof_ckpt_opt = prof->add_option("--ckpt", prof_ckpt, "Profile a checkpoint instead")->check(CLI::ExistingFile);
    prof_cfg_opt->excludes(prof_ckpt_opt);
    prof->add_option("--runs", prof_runs, "Timed runs (after one warm-up)")->check(CLI::PositiveNumber);
    prof->add_flag("--backward", prof_backward, "Also time forward+backward");

    auto* ver = app.add_subcommand("verify", "Run numerical property suites");
    std::string ver_suite;
    ver->add_option("--suite", ver_suite, "kernels, grads, duality, upit or all")
        ->required()
        ->check(CLI::IsMember({"kernels", "grads", "duality", "upit", "all"}));

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : exit_usage;
    }

    try {
        if (gen->parsed()) {
            const auto [lo, hi] = parse_range(gen_snr);
            const auto m = audio::synth_corpus(gen_out, gen_n, gen_dur, gen_sr, lo, hi, gen_seed);
            std::cout << "wrote " << m.size() << " mixtures to " << gen_out << '\n';
        } else if (trn->parsed()) {
            auto cfg = load_config(trn_config);
            if (*seed_opt) {
                cfg.train.seed = trn_seed;
            }
            train::TrainOptions opts;
            opts.checkpoint_path = trn_ckpt;
            opts.log = &std::cerr;
            const auto r = train::train_on_corpus(cfg.model, cfg.train, trn_data, opts);
            std::cout << "steps " << r.state.step << " epochs " << r.state.epoch << " best_valid_loss "
                      << r.state.best_valid_loss << (r.early_stopped ? " (early stop)" : "") << '\n';
            std::cout << "checkpoint " << trn_ckpt << '\n';
        } else if (sep->parsed()) {
            const auto ckpt = checkpoint::load(sep_ckpt);
            const auto mixture = audio::read_wav(sep_in);
            auto outs = train::separate(ckpt, mixture, parse_mode(sep_mode));
            fs::create_directories(sep_out);
            for (std::size_t n = 0; n < outs.size(); ++n) {
                train::limit_peak(outs[n]);
                const auto path = fs::path(sep_out) / ("est_" + std::to_string(n + 1) + ".wav");
                audio::write_wav(path.string(), outs[n]);
                std::cout << path.string() << '\n';
            }
        } else if (evl->parsed()) {
            const auto ckpt = checkpoint::load(evl_ckpt);
            const auto manifest = audio::read_manifest((fs::path(evl_data) / "manifest.txt").string());
            const auto splits = audio::split_manifest(manifest);
            const audio::Manifest& chosen = evl_split == "train"   ? splits.train
                                            : evl_split == "valid" ? splits.valid
                                            : evl_split == "test"  ? splits.test
                                                                   : manifest;
            if (chosen.empty()) {
                throw invalid_argument("eval: the " + evl_split + " split of " + evl_data + " is empty");
            }
            const auto data = train::load_examples(chosen, ckpt.config.sample_rate_hz);
            const auto result = train::evaluate(data, ckpt.params, ckpt.config);
            std::vector<objectives::EvalRow> rows;
            for (const auto& item : result.items) {
                rows.push_back({item.id, item.si_sdri, item.sdri});
            }
            std::ofstream out(evl_report);
            if (!out) {
                throw io_error("cannot write report " + evl_report);
            }
            objectives::write_eval_report(out, rows);
            std::cout << "mean si_sdri_db " << result.si_sdri << " sdri_db " << result.sdri << " over "
                      << rows.size() << " items\n";
        } else if (prof->parsed()) {
            SepConfig cfg;
            ModelParams params;
            if (*prof_ckpt_opt) {
                auto ckpt = checkpoint::load(prof_ckpt);
                cfg = ckpt.config;
                params = std::move(ckpt.params);
            } else if (*prof_cfg_opt) {
                cfg = load_config(prof_config).model;
                params = init_params(cfg, 0);
            } else {
                throw invalid_argument("profile: pass --config FILE or --ckpt FILE");
            }
            profile::RtfOptions opt;
            opt.runs = prof_runs;
            opt.backward = prof_backward;
            profile::write_report(std::cout, profile::measure_rtf(cfg, params, opt));
        } else if (ver->parsed()) {
            const auto report = verify::run(ver_suite);
            verify::write_report(std::cout, report);
            return report.passed() ? 0 : exit_failure;
        }
    } catch (const s4m::invalid_argument& e) {
        std::cerr << "error: " << e.what() << '\n';
        return exit_usage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return exit_failure;
    }
    return 0;
}
