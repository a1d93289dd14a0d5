#include <vqaudit/vqaudit.hpp>

#include <CLI11.hpp>

#include <malloc.h>

#include <chrono>
#include <cstdio>
#include <iostream>

namespace fs = std::filesystem;
using namespace vqa;

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitCheckFailed = 3;

std::string command_line(int argc, char** argv)
{
    std::string s;
    for (int i = 0; i < argc; ++i) {
        s += (i ? " " : "") + std::string(argv[i]);
    }
    return s;
}

void write_text(const fs::path& p, const std::string& s)
{
    write_file_bytes(p, std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

struct GenOptions {
    fs::path out;
    std::uint64_t seed = 0;
    std::size_t episodes = 200;
    std::size_t steps = 100;
    std::size_t rows = 7;
    std::size_t cols = 8;
};

int run_gen(const GenOptions& o)
{
    ensure_writable(o.out);
    tileworld::DatasetConfig cfg;
    cfg.seed = o.seed;
    cfg.episodes = o.episodes;
    cfg.steps = o.steps;
    cfg.rows = o.rows;
    cfg.cols = o.cols;
    const auto episodes = tileworld::generate_episodes(cfg);
    const auto m = tileworld::write_dataset(episodes, o.out, o.seed, cfg.terrain_weights);
    std::cout << "wrote " << m.episodes << " episodes, " << m.transitions << " transitions to " << o.out.string()
              << "\n";
    return 0;
}

struct TrainOptions {
    fs::path dataset;
    fs::path out;
    std::uint64_t seed = 0;
    std::size_t codebook_size = 64;
    std::size_t code_dim = 16;
    std::size_t steps = 5000;
    std::size_t batch_size = 32;
    double lr = 3e-4;
    double beta = 0.25;
    std::size_t subset = 1000;
    std::size_t log_every = 500;
};

int run_train(const TrainOptions& o, const std::string& command)
{
    ensure_writable(o.out);
    const std::string started = utc_timestamp();
    const auto ds = tileworld::read_dataset(o.dataset);
    const auto refs = observation_refs(ds.episodes);

    std::vector<std::size_t> order(refs.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    if (o.subset > 0 && o.subset < refs.size()) {
        Rng rng(derive_seed(o.seed, 23));
        shuffle(order, rng);
        order.resize(o.subset);
        std::sort(order.begin(), order.end());
    }
    std::vector<Tensor> images;
    images.reserve(order.size());
    for (std::size_t i : order) {
        images.push_back(to_tensor(refs[i].obs->frame));
    }

    VQCodecModel model = make_model(
        default_architecture(o.codebook_size, o.code_dim, ds.manifest.image_height, ds.manifest.image_width), o.seed);
    TrainConfig tc;
    tc.steps = o.steps;
    tc.batch_size = o.batch_size;
    tc.learning_rate = o.lr;
    tc.beta = o.beta;
    tc.seed = o.seed;

    const double initial = reconstruction_mse(model, images);
    std::string log = "step,total,reconstruction,codebook,commitment\n";
    const auto t0 = std::chrono::steady_clock::now();
    train(model, images, tc, [&](std::size_t step, const LossBreakdown& l) {
        log += std::to_string(step) + "," + fmt_double(l.total()) + "," + fmt_double(l.reconstruction) + ","
               + fmt_double(l.codebook) + "," + fmt_double(l.commitment) + "\n";
        if (o.log_every > 0 && (step + 1) % o.log_every == 0) {
            const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            std::cerr << "step " << step + 1 << "/" << tc.steps << " recon " << l.reconstruction << " (" << secs
                      << " s)\n";
        }
    });
    const double final_mse = reconstruction_mse(model, images);

    OutputWriter w(o.out);
    w.bytes("checkpoint.bin", serialize_checkpoint(model));
    w.text("train_log.csv", log);
    nlohmann::json summary = {{"initial_mse", initial},
                              {"final_mse", final_mse},
                              {"reduction", initial > 0.0 ? 1.0 - final_mse / initial : 0.0},
                              {"training_images", images.size()},
                              {"steps", tc.steps}};
    w.text("train_summary.json", summary.dump(2) + "\n");

    const nlohmann::json config = {{"seed", o.seed},           {"codebook_size", o.codebook_size},
                                   {"code_dim", o.code_dim},   {"steps", o.steps},
                                   {"batch_size", o.batch_size}, {"learning_rate", o.lr},
                                   {"beta", o.beta},           {"subset", o.subset}};
    const auto& entries = w.entries();
    const auto manifest = manifest_json({command, config, started}, ds.checksum, entries.front().crc32, o.seed, entries);
    write_text(o.out / "run_manifest.json", manifest.dump(2) + "\n");
    std::cout << "initial mse " << fmt_double(initial) << ", final mse " << fmt_double(final_mse) << "\n";
    return 0;
}

struct AuditOptions {
    fs::path dataset;
    fs::path checkpoint;
    fs::path out;
    bool oracle = false;
    std::string embedder = "descriptor";
    AuditConfig cfg;
};

AuditBundle audit_with(const AuditOptions& o, const VQCodecModel& model, const tileworld::Dataset& ds)
{
    AuditConfig cfg = o.cfg;
    cfg.embedder = parse_embedder(o.embedder);
    return run_audit(ds, model, cfg);
}

int run_audit_cmd(const AuditOptions& o, const std::string& command)
{
    if (!o.oracle && o.checkpoint.empty()) {
        throw UsageError("--checkpoint is required unless --oracle is given");
    }
    parse_embedder(o.embedder);
    ensure_writable(o.out);
    const std::string started = utc_timestamp();
    const auto ds = tileworld::read_dataset(o.dataset);
    const VQCodecModel model = o.oracle ? build_oracle_model(ds.manifest.worlds.front().rows,
                                                             ds.manifest.worlds.front().cols)
                                        : load_checkpoint(o.checkpoint);
    const AuditBundle b = audit_with(o, model, ds);
    nlohmann::json config = full_config(b.config);
    config["model"] = o.oracle ? "oracle" : o.checkpoint.string();
    emit_reports(b, o.out, {command, config, started});
    std::cout << "audited " << b.observations << " observations: " << b.kept << " kept and " << b.dropped
              << " zero heatmaps, " << b.crops.size() << " crops\n";
    return 0;
}

int run_report(const fs::path& bundle, const fs::path& out, const std::string& command)
{
    render_report(bundle, out.empty() ? bundle : out, {command, {{"bundle", bundle.string()}}, utc_timestamp()});
    return 0;
}

struct OracleOptions {
    AuditOptions audit;
    GenOptions gen;
    double min_consistency = 0.99;
};

int run_oracle_check(OracleOptions o, const std::string& command)
{
    ensure_writable(o.audit.out);
    const std::string started = utc_timestamp();
    if (o.audit.dataset.empty()) {
        o.audit.dataset = o.audit.out / "dataset";
        o.gen.out = o.audit.dataset;
        run_gen(o.gen);
    }
    const auto ds = tileworld::read_dataset(o.audit.dataset);
    const VQCodecModel model = build_oracle_model(ds.manifest.worlds.front().rows, ds.manifest.worlds.front().cols);
    o.audit.cfg.check_unselected = true;
    const AuditBundle b = audit_with(o.audit, model, ds);
    nlohmann::json config = full_config(b.config);
    config["model"] = "oracle";
    emit_reports(b, o.audit.out, {command, config, started});

    nlohmann::json failures = nlohmann::json::array();
    std::size_t used = 0;
    for (const auto& c : b.codes) {
        if (c.crops == 0) {
            continue;
        }
        ++used;
        if (c.purity.purity != 1.0) {
            failures.push_back("code " + std::to_string(c.code) + " purity " + fmt_double(c.purity.purity));
        }
        if (!c.consistency || c.consistency->score < o.min_consistency) {
            failures.push_back("code " + std::to_string(c.code) + " consistency "
                               + (c.consistency ? fmt_double(c.consistency->score) : std::string("missing")));
        }
    }
    for (const auto& c : b.codes) {
        if (c.selections > 0 && c.crops == 0) {
            failures.push_back("code " + std::to_string(c.code) + " is selected but produced no crops");
        }
    }
    if (b.dropped != 0) {
        failures.push_back(std::to_string(b.dropped) + " selected (observation, code) pairs had zero heatmaps");
    }
    if (b.unselected_nonzero != 0) {
        failures.push_back(std::to_string(b.unselected_nonzero) + " unselected pairs had nonzero heatmaps");
    }
    if (b.kept + b.dropped != b.pairs) {
        failures.push_back("kept + dropped does not equal the number of selected pairs");
    }
    const nlohmann::json result = {{"passed", failures.empty()},
                                   {"used_codes", used},
                                   {"selected_pairs", b.pairs},
                                   {"selected_zero", b.dropped},
                                   {"unselected_pairs", b.unselected_checked},
                                   {"unselected_nonzero", b.unselected_nonzero},
                                   {"min_consistency", o.min_consistency},
                                   {"failures", failures}};
    write_text(o.audit.out / "oracle_check.json", result.dump(2) + "\n");
    std::cout << (failures.empty() ? "oracle check passed" : "oracle check FAILED") << ": " << used
              << " used codes, " << b.pairs << " selected pairs, " << b.unselected_checked << " unselected pairs\n";
    for (const auto& f : failures) {
        std::cout << "  " << f.get<std::string>() << "\n";
    }
    return failures.empty() ? 0 : kExitCheckFailed;
}

void add_audit_flags(CLI::App* app, AuditOptions& o)
{
    AuditConfig& c = o.cfg;
    app->add_option("--out", o.out, "Output directory")->required();
    app->add_option("--seed", c.seed, "Seed for the baseline and t-SNE");
    app->add_option("--act-threshold", c.act_threshold, "Heatmap activation threshold")->capture_default_str();
    app->add_option("--area-threshold", c.area_threshold, "Minimum component area in pixels")->capture_default_str();
    app->add_option("--connectivity", c.connectivity, "Component connectivity (4 or 8)")->capture_default_str();
    app->add_option("--embedder", o.embedder, "Crop embedder")
        ->check(CLI::IsMember({"descriptor", "encoder"}))
        ->capture_default_str();
    app->add_option("--baseline-trials", c.baseline_trials, "Random-crop baseline trials")->capture_default_str();
    app->add_option("--tsne-top-k", c.tsne_top_k, "Codes projected with t-SNE")->capture_default_str();
    app->add_option("--tsne-min-count", c.tsne_min_count, "Minimum embeddings for projection")->capture_default_str();
    app->add_option("--tsne-max-points", c.tsne_max_points_per_code, "Points per projected code")
        ->capture_default_str();
    app->add_option("--tsne-iterations", c.tsne_iterations, "t-SNE iterations")->capture_default_str();
    app->add_option("--perplexity", c.perplexity, "t-SNE perplexity")->capture_default_str();
    app->add_option("--workers", c.workers, "Worker threads")->capture_default_str();
    app->add_option("--gallery-size", c.gallery_size, "Crops per gallery image")->capture_default_str();
}

} // namespace

int main(int argc, char** argv)
{
    // Training allocates the same large im2col buffers every step. Keeping them on the heap instead of
    // mmap/munmap round trips avoids page-fault churn (about 25% of a training step).
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    mallopt(M_TOP_PAD, 256 << 20);
    CLI::App app{"Codebook audit toolkit for vector-quantized image codecs"};
    app.require_subcommand(1);
    const std::string command = command_line(argc, argv);

    GenOptions gen;
    auto* gen_cmd = app.add_subcommand("gen", "Generate a tile-world dataset");
    gen_cmd->add_option("--out", gen.out, "Dataset directory")->required();
    gen_cmd->add_option("--seed", gen.seed, "Seed");
    gen_cmd->add_option("--episodes", gen.episodes, "Episodes")->capture_default_str();
    gen_cmd->add_option("--steps", gen.steps, "Steps per episode")->capture_default_str();
    gen_cmd->add_option("--rows", gen.rows, "World rows")->capture_default_str();
    gen_cmd->add_option("--cols", gen.cols, "World columns")->capture_default_str();

    TrainOptions tr;
    auto* train_cmd = app.add_subcommand("train", "Train the codec on a dataset");
    train_cmd->add_option("--dataset", tr.dataset, "Dataset directory")->required();
    train_cmd->add_option("--out", tr.out, "Output directory for the checkpoint")->required();
    train_cmd->add_option("--seed", tr.seed, "Seed");
    train_cmd->add_option("--codebook-size", tr.codebook_size, "Number of codes")->capture_default_str();
    train_cmd->add_option("--code-dim", tr.code_dim, "Code dimension")->capture_default_str();
    train_cmd->add_option("--steps", tr.steps, "Optimizer steps")->capture_default_str();
    train_cmd->add_option("--batch-size", tr.batch_size, "Batch size")->capture_default_str();
    train_cmd->add_option("--lr", tr.lr, "Adam learning rate")->capture_default_str();
    train_cmd->add_option("--beta", tr.beta, "Commitment weight")->capture_default_str();
    train_cmd->add_option("--subset", tr.subset, "Training images drawn from the dataset (0 = all)")
        ->capture_default_str();
    train_cmd->add_option("--log-every", tr.log_every, "Progress interval in steps (0 = silent)")
        ->capture_default_str();

    AuditOptions au;
    auto* audit_cmd = app.add_subcommand("audit", "Audit a trained codec");
    audit_cmd->add_option("--dataset", au.dataset, "Dataset directory")->required();
    audit_cmd->add_option("--checkpoint", au.checkpoint, "Model checkpoint");
    audit_cmd->add_flag("--oracle", au.oracle, "Audit the hand-built oracle model instead of a checkpoint");
    add_audit_flags(audit_cmd, au);

    fs::path bundle, report_out;
    auto* report_cmd = app.add_subcommand("report", "Render plots from a saved audit bundle");
    report_cmd->add_option("--bundle", bundle, "Audit output directory")->required();
    report_cmd->add_option("--out", report_out, "Where to write plots (default: the bundle)");

    OracleOptions oc;
    oc.gen.episodes = 50;
    auto* oracle_cmd = app.add_subcommand("oracle-check", "Audit the oracle model and assert its guarantees");
    oracle_cmd->add_option("--dataset", oc.audit.dataset, "Dataset directory (generated under --out if omitted)");
    oracle_cmd->add_option("--episodes", oc.gen.episodes, "Episodes when generating")->capture_default_str();
    oracle_cmd->add_option("--steps", oc.gen.steps, "Steps when generating")->capture_default_str();
    oracle_cmd->add_option("--min-consistency", oc.min_consistency, "Required consistency")->capture_default_str();
    add_audit_flags(oracle_cmd, oc.audit);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2; // --help exits 0, every malformed command line exits 2
    }

    try {
        if (*gen_cmd) {
            return run_gen(gen);
        }
        if (*train_cmd) {
            return run_train(tr, command);
        }
        if (*audit_cmd) {
            return run_audit_cmd(au, command);
        }
        if (*report_cmd) {
            return run_report(bundle, report_out, command);
        }
        if (*oracle_cmd) {
            oc.gen.seed = oc.audit.cfg.seed;
            return run_oracle_check(oc, command);
        }
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitFailure;
    }
    return 0;
}
