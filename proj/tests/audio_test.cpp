#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>

#include "s4m/audio.hpp"
#include "s4m/objectives.hpp"
#include "tempdir.hpp"

namespace {

using namespace s4m;
using namespace s4m::audio;
namespace fs = std::filesystem;

AudioClip noise_clip(std::size_t n, std::uint64_t seed, double scale = 0.3, int sr = 8000)
{
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(0.0, scale);
    AudioClip c{std::vector<double>(n), sr};
    for (double& v : c.samples) {
        v = std::clamp(dist(rng), -1.0, 1.0);
    }
    return c;
}

std::string slurp(const fs::path& p)
{
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void expect_format_error(const std::string& bytes, const std::string& fragment)
{
    try {
        decode_wav(bytes);
        ADD_FAILURE() << "expected a format error mentioning '" << fragment << "'";
    } catch (const format_error& e) {
        EXPECT_NE(std::string(e.what()).find(fragment), std::string::npos) << e.what();
    }
}

TEST(Wav, RoundTripWithinQuantization)
{
    TempDir dir("wav");
    const AudioClip clip = noise_clip(4000, 1);
    write_wav(dir.file("a.wav"), clip);
    const AudioClip back = read_wav(dir.file("a.wav"));
    ASSERT_EQ(back.samples.size(), clip.samples.size());
    EXPECT_EQ(back.sample_rate_hz, 8000);
    for (std::size_t i = 0; i < clip.samples.size(); ++i) {
        EXPECT_LE(std::abs(back.samples[i] - clip.samples[i]), 1.0 / 32768.0);
    }
}

TEST(Wav, ZeroClipIsExact)
{
    const AudioClip zero{std::vector<double>(100, 0.0), 16000};
    const AudioClip back = decode_wav(encode_wav(zero));
    EXPECT_EQ(back.samples, zero.samples);
    EXPECT_EQ(back.sample_rate_hz, 16000);
}

TEST(Wav, SaturatesInsteadOfWrapping)
{
    EXPECT_EQ(quantize(1.5), 32767);
    EXPECT_EQ(quantize(1.0), 32767);
    EXPECT_EQ(quantize(-1.0), -32768);
    EXPECT_EQ(quantize(-7.0), -32768);
    EXPECT_EQ(quantize(0.5), 16384);
}

TEST(Wav, RejectsStereoNonPcmAndTruncation)
{
    const std::string good = encode_wav(noise_clip(16, 2));
    std::string stereo = good;
    stereo[22] = 2; // channel count
    expect_format_error(stereo, "mono");
    std::string floating = good;
    floating[20] = 3; // IEEE float format tag
    expect_format_error(floating, "PCM");
    std::string eight_bit = good;
    eight_bit[34] = 8;
    expect_format_error(eight_bit, "16-bit");
    expect_format_error(good.substr(0, 10), "truncated");
    expect_format_error(good.substr(0, good.size() - 4), "truncated 'data'");
    expect_format_error("RIFX" + good.substr(4), "RIFF");
}

TEST(Wav, MissingFileIsIoError)
{
    EXPECT_THROW(read_wav("/nonexistent/dir/x.wav"), io_error);
}

TEST(Mix, SnrSetsPowerRatio)
{
    const AudioClip a = noise_clip(2000, 3, 0.1);
    const AudioClip b = noise_clip(2000, 4, 0.05);
    for (double snr : {0.0, 10.0, -5.0, 3.3}) {
        const Mixture m = mix_sources(a, b, snr);
        const double ratio = power(m.source1.samples) / power(m.source2.samples);
        EXPECT_NEAR(ratio / std::pow(10.0, snr / 10.0), 1.0, 1e-9) << snr;
    }
}

TEST(Mix, MixtureIsSumOfReturnedSources)
{
    const Mixture m = mix_sources(noise_clip(1000, 5, 0.1), noise_clip(1000, 6, 0.1), 2.0);
    EXPECT_DOUBLE_EQ(m.gain, 1.0);
    for (std::size_t i = 0; i < 1000; ++i) {
        EXPECT_NEAR(m.mixture.samples[i] - m.source1.samples[i] - m.source2.samples[i], 0.0, 1e-15);
    }
}

TEST(Mix, LoudMixtureIsPeakNormalizedByOneSharedGain)
{
    const AudioClip a = noise_clip(1000, 7, 0.9);
    const AudioClip b = noise_clip(1000, 8, 0.9);
    const Mixture m = mix_sources(a, b, 0.0);
    EXPECT_LT(m.gain, 1.0);
    double peak = 0.0;
    for (std::size_t i = 0; i < 1000; ++i) {
        peak = std::max(peak, std::abs(m.mixture.samples[i]));
        EXPECT_NEAR(m.mixture.samples[i], m.source1.samples[i] + m.source2.samples[i], 1e-15);
        EXPECT_NEAR(m.source1.samples[i], a.samples[i] * m.gain, 1e-15);
    }
    EXPECT_NEAR(peak, peak_target, 1e-12);
    EXPECT_NEAR(power(m.source1.samples) / power(m.source2.samples), 1.0, 1e-9);
}

TEST(Mix, SilentOrMismatchedSourcesRejected)
{
    const AudioClip a = noise_clip(100, 9);
    EXPECT_THROW(mix_sources(a, AudioClip{std::vector<double>(100, 0.0), 8000}, 0.0), s4m::invalid_argument);
    EXPECT_THROW(mix_sources(a, noise_clip(99, 10), 0.0), s4m::invalid_argument);
    EXPECT_THROW(mix_sources(a, noise_clip(100, 10, 0.3, 16000), 0.0), s4m::invalid_argument);
}

TEST(Manifest, LineFormatAndRelativeResolution)
{
    TempDir dir("manifest");
    const ManifestEntry e{"mix/a.wav", {"s1/a.wav", "s2/a.wav"}, -1.25, 18446744073709551615ull};
    EXPECT_EQ(format_manifest_line(e), "mix/a.wav|s1/a.wav|s2/a.wav|-1.25|18446744073709551615");
    write_manifest(dir.file("manifest.txt"), {e, e});
    const Manifest back = read_manifest(dir.file("manifest.txt"));
    ASSERT_EQ(back.size(), 2u);
    EXPECT_EQ(back[0].mixture, (dir.path() / "mix/a.wav").string());
    EXPECT_EQ(back[0].sources.size(), 2u);
    EXPECT_EQ(back[0].snr_db, -1.25);
    EXPECT_EQ(back[0].seed, e.seed);

    std::ofstream(dir.file("bad.txt")) << "only|three|fields\n";
    EXPECT_THROW(read_manifest(dir.file("bad.txt")), format_error);
    std::ofstream(dir.file("bad2.txt")) << "a|b|c|notanumber|1\n";
    EXPECT_THROW(read_manifest(dir.file("bad2.txt")), format_error);
}

TEST(Manifest, SplitsAreEightyTenTen)
{
    Manifest m(200);
    for (std::size_t i = 0; i < m.size(); ++i) {
        m[i].seed = i;
    }
    const Splits s = split_manifest(m);
    EXPECT_EQ(s.train.size(), 160u);
    EXPECT_EQ(s.valid.size(), 20u);
    EXPECT_EQ(s.test.size(), 20u);
    EXPECT_EQ(s.valid.front().seed, 160u);
    EXPECT_EQ(s.test.front().seed, 180u);
}

TEST(Seeds, SplitmixIsStableAndDistinct)
{
    EXPECT_EQ(splitmix64(0), 0xE220A8397B1DCDAFull);
    EXPECT_NE(item_seed(1, 0), item_seed(1, 1));
    EXPECT_NE(item_seed(1, 0), item_seed(2, 0));
    EXPECT_EQ(item_seed(9, 4), item_seed(9, 4));
}

TEST(Corpus, SameSeedIsBitwiseIdentical)
{
    TempDir a("corpus_a");
    TempDir b("corpus_b");
    TempDir c("corpus_c");
    synth_corpus(a.path().string(), 6, 0.5, 8000, -5, 5, 42);
    synth_corpus(b.path().string(), 6, 0.5, 8000, -5, 5, 42);
    synth_corpus(c.path().string(), 6, 0.5, 8000, -5, 5, 43);
    for (const auto& entry : fs::recursive_directory_iterator(a.path())) {
        if (!entry.is_regular_file()) {
            continue;
        }
        const auto rel = fs::relative(entry.path(), a.path());
        EXPECT_EQ(slurp(entry.path()), slurp(b.path() / rel)) << rel;
    }
    EXPECT_NE(slurp(a.path() / "mix/item_00000.wav"), slurp(c.path() / "mix/item_00000.wav"));
}

TEST(Corpus, CardinalityContentAndStatistics)
{
    TempDir dir("corpus");
    const Manifest m = synth_corpus(dir.path().string(), 200, 2.0, 8000, -5, 5, 7);
    std::size_t wavs = 0;
    for (const auto& entry : fs::recursive_directory_iterator(dir.path())) {
        wavs += entry.path().extension() == ".wav";
    }
    EXPECT_EQ(wavs, 600u);
    const Manifest back = read_manifest(dir.file("manifest.txt"));
    ASSERT_EQ(back.size(), 200u);

    double mean_si_snr = 0.0;
    for (const auto& e : back) {
        EXPECT_GE(e.snr_db, -5.0);
        EXPECT_LE(e.snr_db, 5.0);
        const AudioClip mix = read_wav(e.mixture);
        const AudioClip s1 = read_wav(e.sources[0]);
        const AudioClip s2 = read_wav(e.sources[1]);
        ASSERT_EQ(mix.samples.size(), 16000u);
        ASSERT_EQ(mix.sample_rate_hz, 8000);
        std::size_t saturated = 0;
        for (std::size_t i = 0; i < mix.samples.size(); ++i) {
            ASSERT_TRUE(std::isfinite(mix.samples[i]));
            EXPECT_LE(std::abs(mix.samples[i] - s1.samples[i] - s2.samples[i]), 2.0 / 32768.0);
            saturated += std::abs(mix.samples[i]) >= 32767.0 / 32768.0;
        }
        EXPECT_LE(saturated, mix.samples.size() / 100);
        const double p1 = power(s1.samples);
        const double p2 = power(s2.samples);
        EXPECT_NEAR(10.0 * std::log10(p1 / p2), e.snr_db, 0.05);
        mean_si_snr += objectives::si_snr(mix.samples, s1.samples) / 200.0;
    }
    EXPECT_GT(mean_si_snr, -10.0);
    EXPECT_LT(mean_si_snr, 10.0);
}

TEST(Corpus, UnwritableDirectoryIsIoError)
{
    TempDir dir("blocked");
    std::ofstream(dir.file("file")) << "x";
    EXPECT_THROW(synth_corpus(dir.file("file") + "/sub", 1, 0.1, 8000, 0, 0, 1), io_error);
    EXPECT_THROW(synth_corpus(dir.path().string(), 0, 0.1, 8000, 0, 0, 1), s4m::invalid_argument);
}

} // namespace
