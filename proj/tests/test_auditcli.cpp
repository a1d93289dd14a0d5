#include <vqaudit/audit.hpp>
#include <vqaudit/report.hpp>
#include <vqaudit/tileworld.hpp>
#include <vqaudit/vqcodec.hpp>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>
#include <unistd.h>

using namespace vqa;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name)
{
    const fs::path p = fs::temp_directory_path() / ("vqaudit_test_" + std::to_string(::getpid())) / name;
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p)
{
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

int run(const std::string& cmd)
{
    const int status = std::system((cmd + " > /dev/null 2>&1").c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

const std::vector<tileworld::EpisodeLog>& small_episodes()
{
    static const std::vector<tileworld::EpisodeLog> eps = [] {
        tileworld::DatasetConfig cfg;
        cfg.seed = 3;
        cfg.episodes = 2;
        cfg.steps = 10;
        return tileworld::generate_episodes(cfg);
    }();
    return eps;
}

const VQCodecModel& oracle()
{
    static const VQCodecModel m = build_oracle_model();
    return m;
}

AuditConfig quick_config()
{
    AuditConfig c;
    c.seed = 5;
    c.tsne_iterations = 250;
    c.tsne_min_count = 20;
    c.tsne_max_points_per_code = 30;
    return c;
}

const AuditBundle& oracle_bundle()
{
    static const AuditBundle b = [] {
        AuditConfig c = quick_config();
        c.check_unselected = true;
        return run_audit(std::span<const tileworld::EpisodeLog>(small_episodes()), oracle(), c);
    }();
    return b;
}

RgbImage solid(std::size_t w, std::size_t h, std::uint8_t r, std::uint8_t g, std::uint8_t b)
{
    RgbImage img(w, h);
    for (std::size_t i = 0; i < w * h; ++i) {
        img.pixels[3 * i] = r;
        img.pixels[3 * i + 1] = g;
        img.pixels[3 * i + 2] = b;
    }
    return img;
}

Heatmap flat_heatmap(std::size_t w, std::size_t h, double v)
{
    Heatmap m;
    m.width = w;
    m.height = h;
    m.values.assign(w * h, v);
    m.is_zero = v == 0.0;
    return m;
}

} // namespace

TEST(Overlay, ColormapEndpoints)
{
    EXPECT_EQ(colormap(0), (Rgb{0, 0, 128}));
    EXPECT_EQ(colormap(255), (Rgb{128, 0, 0}));
    EXPECT_EQ(colormap(128)[1], 255);
}

TEST(Overlay, HandBlendedPixel)
{
    const RgbImage frame = solid(2, 1, 100, 50, 10);
    Heatmap h = flat_heatmap(2, 1, 0.0);
    h.values[1] = 1.0;
    const RgbImage out = overlay(frame, h, 0.25);
    // 0.75 * frame + 0.25 * (0,0,128) and 0.25 * (128,0,0)
    EXPECT_EQ(out.at(0, 0, 0), 75);
    EXPECT_EQ(out.at(0, 0, 1), 38);
    EXPECT_EQ(out.at(0, 0, 2), 40);
    EXPECT_EQ(out.at(0, 1, 0), 107);
    EXPECT_EQ(out.at(0, 1, 1), 38);
    EXPECT_EQ(out.at(0, 1, 2), 8);
}

TEST(Overlay, AlphaZeroReturnsFrameAndZeroMapBlendsLowestColor)
{
    const RgbImage frame = solid(3, 2, 20, 200, 90);
    EXPECT_EQ(overlay(frame, flat_heatmap(3, 2, 0.7), 0.0).pixels, frame.pixels);
    const RgbImage full = overlay(frame, flat_heatmap(3, 2, 0.0), 1.0);
    for (std::size_t i = 0; i < 6; ++i) {
        EXPECT_EQ(full.pixels[3 * i], 0);
        EXPECT_EQ(full.pixels[3 * i + 2], 128);
    }
}

TEST(Overlay, RejectsMismatchAndBadAlpha)
{
    const RgbImage frame = solid(3, 2, 0, 0, 0);
    EXPECT_ANY_THROW(overlay(frame, flat_heatmap(2, 3, 0.0)));
    EXPECT_ANY_THROW(overlay(frame, flat_heatmap(3, 2, 0.0), 1.5));
}

TEST(Csv, CooccurrenceRoundTripsExactly)
{
    const auto& b = oracle_bundle();
    const fs::path dir = scratch("cooc");
    {
        std::ofstream f(dir / "cooccurrence.csv", std::ios::binary);
        f << cooccurrence_csv(b.cooccurrence);
    }
    const ParsedCooccurrence back = read_cooccurrence_csv(dir / "cooccurrence.csv");
    ASSERT_EQ(back.size, b.cooccurrence.size);
    EXPECT_EQ(back.rates, b.cooccurrence.rates);
}

TEST(Csv, MislabelledCooccurrenceRejected)
{
    const fs::path dir = scratch("badcooc");
    std::ofstream(dir / "c.csv") << "code,0,1\n0,0,0.5\n2,0.5,0\n";
    EXPECT_THROW(read_cooccurrence_csv(dir / "c.csv"), LoadError);
}

TEST(OracleAudit, EverySelectedCodeIsPure)
{
    const auto& b = oracle_bundle();
    std::size_t with_crops = 0;
    for (const auto& c : b.codes) {
        if (c.observations == 0) {
            EXPECT_EQ(c.crops, 0u);
            continue;
        }
        ASSERT_GT(c.crops, 0u) << "code " << c.code;
        ++with_crops;
        EXPECT_DOUBLE_EQ(c.purity.purity, 1.0) << "code " << c.code;
        if (c.consistency) {
            EXPECT_GE(c.consistency->score, 0.99) << "code " << c.code;
        }
    }
    EXPECT_GT(with_crops, 5u);
}

TEST(OracleAudit, HeatmapNonzeroExactlyWhenSelected)
{
    const auto& b = oracle_bundle();
    EXPECT_EQ(b.dropped, 0u);
    EXPECT_GT(b.unselected_checked, 0u);
    EXPECT_EQ(b.unselected_nonzero, 0u);
    EXPECT_EQ(b.pairs + b.unselected_checked, b.observations * b.codebook_size);
}

TEST(OracleAudit, AccountingIdentity)
{
    const auto& b = oracle_bundle();
    std::size_t pairs = 0, heatmaps = 0, kept = 0, dropped = 0, crops = 0;
    for (const auto& c : b.codes) {
        pairs += c.observations;
        heatmaps += c.heatmaps;
        kept += c.kept;
        dropped += c.dropped;
        crops += c.crops;
    }
    EXPECT_EQ(b.observations, 22u);
    EXPECT_EQ(pairs, b.pairs);
    EXPECT_EQ(heatmaps, b.pairs);
    EXPECT_EQ(kept + dropped, b.pairs);
    EXPECT_EQ(b.kept + b.dropped, b.pairs);
    EXPECT_EQ(crops, b.crops.size());
    EXPECT_DOUBLE_EQ(b.zero_fraction, static_cast<double>(b.dropped) / static_cast<double>(b.pairs));
}

TEST(OracleAudit, CropsSortedByCode)
{
    const auto& crops = oracle_bundle().crops;
    for (std::size_t i = 1; i < crops.size(); ++i) {
        const auto& a = crops[i - 1];
        const auto& c = crops[i];
        EXPECT_LE(std::tie(a.code, a.episode, a.step), std::tie(c.code, c.episode, c.step));
    }
}

TEST(OracleAudit, SingleObservationUsesAtMostGridCodes)
{
    std::vector<tileworld::EpisodeLog> one{small_episodes().front()};
    one[0].observations.resize(1);
    one[0].actions.clear();
    const AuditBundle b = run_audit(std::span<const tileworld::EpisodeLog>(one), oracle(), quick_config());
    EXPECT_EQ(b.observations, 1u);
    EXPECT_GT(b.pairs, 0u);
    EXPECT_LE(b.pairs, b.grid_h * b.grid_w);
}

TEST(AuditRun, IndependentOfWorkerCount)
{
    AuditConfig c = quick_config();
    c.workers = 1;
    std::vector<tileworld::EpisodeLog> many;
    for (int rep = 0; rep < 2; ++rep) {
        for (auto e : small_episodes()) {
            e.id += rep * 10;
            many.push_back(std::move(e));
        }
    }
    const AuditBundle a = run_audit(std::span<const tileworld::EpisodeLog>(many), oracle(), c);
    c.workers = 3;
    const AuditBundle b = run_audit(std::span<const tileworld::EpisodeLog>(many), oracle(), c);
    EXPECT_EQ(codes_csv(a), codes_csv(b));
    EXPECT_EQ(cooccurrence_csv(a.cooccurrence), cooccurrence_csv(b.cooccurrence));
    EXPECT_EQ(tsne_csv(a), tsne_csv(b));
    EXPECT_EQ(crops_csv(a), crops_csv(b));
    EXPECT_EQ(summary_json(a).dump(), summary_json(b).dump());
}

TEST(AuditRun, RejectsEmptyDatasetAndBadConfig)
{
    EXPECT_THROW(run_audit(std::span<const tileworld::EpisodeLog>(), oracle(), quick_config()), ConfigError);
    AuditConfig c = quick_config();
    c.connectivity = 6;
    EXPECT_THROW(run_audit(std::span<const tileworld::EpisodeLog>(small_episodes()), oracle(), c), ConfigError);
}

TEST(AuditRun, NoCropsGivesHeaderOnlyTablesAndNoScorePlots)
{
    AuditConfig c = quick_config();
    c.area_threshold = 1'000'000;
    const AuditBundle b = run_audit(std::span<const tileworld::EpisodeLog>(small_episodes()), oracle(), c);
    EXPECT_TRUE(b.crops.empty());
    EXPECT_FALSE(b.median_consistency.has_value());
    EXPECT_FALSE(b.median_gap().has_value());
    const fs::path dir = scratch("nocrops");
    emit_reports(b, dir);
    const auto lines = [](const std::string& s) { return std::count(s.begin(), s.end(), '\n'); };
    EXPECT_EQ(lines(slurp(dir / "crops.csv")), 1);
    EXPECT_EQ(lines(slurp(dir / "tsne.csv")), 1);
    EXPECT_FALSE(fs::exists(dir / "plots/consistency.png"));
    EXPECT_FALSE(fs::exists(dir / "plots/tsne.png"));
    EXPECT_TRUE(fs::exists(dir / "plots/frequency.png"));
    const auto summary = nlohmann::json::parse(slurp(dir / "summary.json"));
    EXPECT_TRUE(summary["median_gap"].is_null());
}

TEST(Reports, UnwritableDirectoryFailsBeforeWriting)
{
    const fs::path dir = scratch("blocked");
    std::ofstream(dir / "file") << "x";
    EXPECT_THROW(ensure_writable(dir / "file" / "out"), IoError);
    EXPECT_THROW(emit_reports(oracle_bundle(), dir / "file" / "out"), IoError);
}

TEST(Reports, ManifestIndexesEveryOutput)
{
    const fs::path dir = scratch("bundle");
    const auto manifest = emit_reports(oracle_bundle(), dir);
    ASSERT_FALSE(manifest["outputs"].empty());
    std::size_t files = 0;
    for (const auto& o : manifest["outputs"]) {
        const fs::path p = dir / o["path"].get<std::string>();
        ASSERT_TRUE(fs::exists(p)) << p;
        const auto bytes = read_file_bytes(p);
        EXPECT_EQ(bytes.size(), o["bytes"].get<std::size_t>());
        EXPECT_EQ(crc32_hex(crc32_of(bytes)), o["crc32"].get<std::string>()) << p;
        ++files;
    }
    std::size_t on_disk = 0;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        on_disk += e.is_regular_file() ? 1 : 0;
    }
    EXPECT_EQ(on_disk, files + 1); // plus run_manifest.json itself
    EXPECT_TRUE(fs::exists(dir / "plots/consistency.png"));
    EXPECT_TRUE(fs::exists(dir / "plots/cooccurrence.png"));
}

TEST(Reports, SummaryCarriesAccountingAndNoTimestamps)
{
    const auto j = summary_json(oracle_bundle());
    EXPECT_EQ(j["heatmaps_total"].get<std::size_t>(), oracle_bundle().pairs);
    EXPECT_TRUE(j.contains("zero_heatmap_fraction"));
    EXPECT_FALSE(j.contains("started_at"));
    EXPECT_FALSE(j["config"].contains("workers"));
}

TEST(Reports, RenderReportRecreatesPlots)
{
    const fs::path bundle = scratch("bundle_src");
    emit_reports(oracle_bundle(), bundle);
    const fs::path out = scratch("rerender");
    const auto manifest = render_report(bundle, out);
    for (const auto& o : manifest["outputs"]) {
        const std::string p = o["path"].get<std::string>();
        EXPECT_EQ(slurp(out / p), slurp(bundle / p)) << p;
    }
    EXPECT_THROW(render_report(out, scratch("rerender2")), LoadError);
}

TEST(Cli, GenAuditReportSmoke)
{
    const std::string cli = VQAUDIT_CLI_PATH;
    const fs::path root = scratch("cli");
    const std::string ds = (root / "ds").string();
    ASSERT_EQ(run(cli + " gen --out " + ds + " --seed 2 --episodes 1 --steps 6"), 0);
    ASSERT_EQ(run(cli + " audit --dataset " + ds + " --oracle --out " + (root / "audit").string()
                  + " --seed 1 --tsne-min-count 10 --tsne-iterations 250"),
              0);
    EXPECT_TRUE(fs::exists(root / "audit/run_manifest.json"));
    EXPECT_TRUE(fs::exists(root / "audit/summary.json"));
    EXPECT_EQ(run(cli + " report --bundle " + (root / "audit").string() + " --out " + (root / "rep").string()), 0);
    EXPECT_TRUE(fs::exists(root / "rep/report_manifest.json"));
}

TEST(Cli, UsageAndLoadErrorsExitNonzero)
{
    const std::string cli = VQAUDIT_CLI_PATH;
    const fs::path root = scratch("cli_err");
    EXPECT_EQ(run(cli + " audit --oracle"), 2);
    EXPECT_EQ(run(cli + " frobnicate"), 2);
    EXPECT_NE(run(cli + " audit --dataset " + (root / "missing").string() + " --oracle --out " + (root / "o").string()), 0);
    EXPECT_EQ(run(cli + " audit --dataset " + (root / "missing").string() + " --out " + (root / "o").string()), 2);
}
