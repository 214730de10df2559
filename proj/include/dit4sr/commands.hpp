#pragma once

// The command-line operations as library functions: each is a pure function of the
// run configuration and the files it names.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "dit4sr/checkpoint.hpp"
#include "dit4sr/config.hpp"
#include "dit4sr/gradcheck.hpp"

namespace dit4sr {

namespace fs = std::filesystem;

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitNumerical = 2, kExitIo = 3 };

/// DIT4SR_LOG=quiet|info|debug (default info); messages go to stderr.
class Log {
public:
    enum Level { quiet = 0, info = 1, debug = 2 };

    static Level level() {
        static const Level l = [] {
            const char* v = std::getenv("DIT4SR_LOG");
            if (!v) return info;
            const std::string s = v;
            if (s == "quiet") return quiet;
            if (s == "debug") return debug;
            return info;
        }();
        return l;
    }
    static void at(Level l, const std::string& msg) {
        if (level() >= l) std::cerr << msg << '\n';
    }
};

inline void log_info(const std::string& m) { Log::at(Log::info, m); }
inline void log_debug(const std::string& m) { Log::at(Log::debug, m); }

/// Maps an exception to the documented exit code.
inline int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const IoError*>(&e)) return kExitIo;
    if (dynamic_cast<const NumericalError*>(&e)) return kExitNumerical;
    return kExitUsage;
}

inline int run_guarded(const std::function<int()>& body, std::ostream& err = std::cerr) {
    try {
        return body();
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return exit_code_for(e);
    }
}

namespace detail {

inline void ensure_dir(const fs::path& p) {
    std::error_code ec;
    fs::create_directories(p, ec);
    if (ec || !fs::is_directory(p)) throw IoError("cannot create directory " + p.string());
}

inline void write_text(const fs::path& p, const std::string& text) {
    if (p.has_parent_path()) ensure_dir(p.parent_path());
    std::ofstream f(p);
    if (!f) throw IoError("cannot write " + p.string());
    f << text;
    if (!f) throw IoError("write failed for " + p.string());
}

inline std::string read_text(const fs::path& p) {
    std::ifstream f(p);
    if (!f) throw IoError("cannot open " + p.string());
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

inline std::string index_name(std::uint64_t i) {
    std::ostringstream os;
    os << std::setw(5) << std::setfill('0') << i;
    return os.str();
}

inline std::string join_tags(const std::vector<std::size_t>& tags) {
    if (tags.empty()) return "-";
    std::string s;
    for (std::size_t i = 0; i < tags.size(); ++i) s += (i ? "," : "") + std::to_string(tags[i]);
    return s;
}

inline std::vector<std::size_t> parse_tags(const std::string& s) {
    std::vector<std::size_t> out;
    if (s == "-") return out;
    for (const auto& t : split_list(s)) out.push_back(parse_number<std::size_t>("tag", t));
    return out;
}

inline void check_pair_extents(const SamplePair& p, const ModelConfig& m, const std::string& where) {
    if (p.hr.height != m.latent_h || p.hr.width != m.latent_w || p.hr.channels != m.latent_channels ||
        p.lr.height * m.scale_factor != m.latent_h || p.lr.width * m.scale_factor != m.latent_w ||
        p.lr.channels != m.latent_channels)
        throw ConfigError(where + ": pair " + std::to_string(p.index) + " has HR " + std::to_string(p.hr.height) +
                          "x" + std::to_string(p.hr.width) + ", LR " + std::to_string(p.lr.height) + "x" +
                          std::to_string(p.lr.width) + "; the model expects HR " + std::to_string(m.latent_h) + "x" +
                          std::to_string(m.latent_w) + " at scale " + std::to_string(m.scale_factor));
}

}  // namespace detail

// ------------------------------------------------------------------ dataset on disk

inline constexpr const char* kManifestName = "manifest.tsv";

/// Manifest rows: index, seed, hr path, lr path, trace path, tags ("-" when none).
/// Paths are relative to the data directory.
struct ManifestEntry {
    std::uint64_t index = 0;
    std::uint64_t seed = 0;
    std::string hr, lr, trace;
    std::vector<std::size_t> tags;
};

inline std::vector<ManifestEntry> read_manifest(const fs::path& data_dir) {
    const fs::path path = data_dir / kManifestName;
    std::ifstream f(path);
    if (!f) throw IoError("cannot open " + path.string() + " (run `synth` first)");
    std::vector<ManifestEntry> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream is(line);
        ManifestEntry e;
        std::string tags;
        if (!(is >> e.index >> e.seed >> e.hr >> e.lr >> e.trace >> tags))
            throw IoError(path.string() + ":" + std::to_string(lineno) + ": malformed manifest row");
        e.tags = detail::parse_tags(tags);
        out.push_back(std::move(e));
    }
    return out;
}

inline std::vector<SamplePair> load_dataset(const fs::path& data_dir) {
    std::vector<SamplePair> out;
    for (const auto& e : read_manifest(data_dir)) {
        SamplePair p;
        p.index = e.index;
        p.hr = read_image((data_dir / e.hr).string());
        p.lr = read_image((data_dir / e.lr).string());
        p.tags = e.tags;
        p.trace = DegradationTrace::parse(detail::read_text(data_dir / e.trace));
        out.push_back(std::move(p));
    }
    if (out.empty()) throw IoError((data_dir / kManifestName).string() + " lists no pairs");
    return out;
}

/// Loads the dataset and splits off the held-out tail, checking extents against the model.
inline DataSplit load_split(const RunConfig& cfg) {
    auto pairs = load_dataset(cfg.paths.data_dir);
    for (const auto& p : pairs) detail::check_pair_extents(p, cfg.model, "dataset");
    return split_heldout(std::move(pairs), cfg.data.eval_fraction);
}

// ------------------------------------------------------------------ commands

/// Writes data.count glyph pairs under paths.data_dir: hr/, lr/, traces/ and the manifest.
inline std::vector<ManifestEntry> cmd_synth(const RunConfig& cfg) {
    cfg.validate();
    const auto& m = cfg.model;
    if (m.latent_h % m.scale_factor != 0 || m.latent_w % m.scale_factor != 0)
        throw ConfigError("synth: HR " + std::to_string(m.latent_h) + "x" + std::to_string(m.latent_w) +
                          " is not divisible by scale " + std::to_string(m.scale_factor));
    if (m.latent_channels != 3) throw ConfigError("synth: glyph images are RGB; model.latent_channels must be 3");
    const fs::path dir = cfg.paths.data_dir;
    for (const char* sub : {"hr", "lr", "traces"}) detail::ensure_dir(dir / sub);
    const DegradationConfig deg = cfg.effective_degradation();
    std::vector<ManifestEntry> entries;
    std::ostringstream manifest;
    for (std::size_t i = 0; i < cfg.data.count; ++i) {
        const SamplePair p = make_glyph_pair(m.latent_h, m.latent_w, deg, i);
        ManifestEntry e;
        e.index = p.index;
        e.seed = deg.seed;
        e.hr = "hr/" + detail::index_name(i) + ".ppm";
        e.lr = "lr/" + detail::index_name(i) + ".ppm";
        e.trace = "traces/" + detail::index_name(i) + ".txt";
        e.tags = p.tags;
        write_image((dir / e.hr).string(), p.hr);
        write_image((dir / e.lr).string(), p.lr);
        detail::write_text(dir / e.trace, p.trace.to_text());
        manifest << e.index << '\t' << e.seed << '\t' << e.hr << '\t' << e.lr << '\t' << e.trace << '\t'
                 << detail::join_tags(e.tags) << '\n';
        entries.push_back(std::move(e));
    }
    detail::write_text(dir / kManifestName, manifest.str());
    log_info("synth: wrote " + std::to_string(entries.size()) + " pairs to " + dir.string());
    return entries;
}

inline Model<float> make_model(const RunConfig& cfg) { return Model<float>(cfg.model, cfg.init); }

inline std::string eval_csv(const EvalResult& e) {
    std::ostringstream os;
    os << std::setprecision(17) << "psnr,ssim,bicubic_psnr,bicubic_ssim\n"
       << e.psnr << ',' << e.ssim << ',' << e.bicubic_psnr << ',' << e.bicubic_ssim << '\n';
    return os.str();
}

struct TrainSummary {
    std::uint64_t steps_done = 0;
    std::vector<double> losses;  // this invocation only
    EvalResult eval;
};

/// Trains up to train.steps total optimizer steps. With `resume`, weights, optimizer
/// state and the step counter come from paths.checkpoint and metrics are appended.
/// Writes paths.checkpoint, report_dir/metrics.csv (step, loss, wall_ms) and
/// report_dir/eval.csv (held-out fidelity at sample.steps / sample.seed).
inline TrainSummary cmd_train(const RunConfig& cfg, bool resume = false) {
    cfg.validate();
    const VariantSpec spec = VariantSpec::of(cfg.model.variant);
    spec.validate();
    const DataSplit data = load_split(cfg);
    Model<float> model = make_model(cfg);
    Trainer<float> trainer(model, data.train, cfg.train);
    if (resume) load_checkpoint(cfg.paths.checkpoint, model, &trainer.optimizer());

    const fs::path reports = cfg.paths.report_dir;
    detail::ensure_dir(reports);
    const fs::path metrics_path = reports / "metrics.csv";
    const bool append = resume && fs::exists(metrics_path);
    std::ofstream metrics(metrics_path, append ? std::ios::app : std::ios::trunc);
    if (!metrics) throw IoError("cannot write " + metrics_path.string());
    if (!append) metrics << "step,loss,wall_ms\n";
    metrics << std::setprecision(9);

    TrainSummary out;
    const auto t0 = std::chrono::steady_clock::now();
    while (trainer.steps_done() < cfg.train.steps) {
        const std::uint64_t step = trainer.steps_done();
        const double loss = trainer.step();
        const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        metrics << step << ',' << loss << ',' << std::llround(ms) << '\n';
        out.losses.push_back(loss);
        if (cfg.checkpoint_every && trainer.steps_done() % cfg.checkpoint_every == 0)
            save_checkpoint(cfg.paths.checkpoint, model, &trainer.optimizer());
        if ((step + 1) % 100 == 0) log_info("train: step " + std::to_string(step + 1) + " loss " + std::to_string(loss));
    }
    if (!metrics) throw IoError("write failed for " + metrics_path.string());
    save_checkpoint(cfg.paths.checkpoint, model, &trainer.optimizer());
    out.steps_done = trainer.steps_done();
    out.eval = evaluate(model, data.heldout, DiffusionSchedule{cfg.sample.steps}, cfg.sample.seed);
    detail::write_text(reports / "eval.csv", eval_csv(out.eval));
    log_info("train: held-out PSNR " + std::to_string(out.eval.psnr) + " dB (bicubic " +
             std::to_string(out.eval.bicubic_psnr) + ")");
    return out;
}

inline Model<float> load_model(const RunConfig& cfg) {
    Model<float> model = make_model(cfg);
    load_checkpoint(cfg.paths.checkpoint, model);
    return model;
}

/// Restores paths.input into paths.output. With sample.dump_attention, the attention
/// maps of the first Euler step go to <report_dir>/attention.bin as a tensor file.
inline ImageBuffer cmd_sample(const RunConfig& cfg) {
    cfg.validate();
    if (cfg.paths.input.empty()) throw ConfigError("sample: paths.input (LR image) is required");
    const Model<float> model = load_model(cfg);
    const ImageBuffer lr = read_image(cfg.paths.input);
    const auto& m = cfg.model;
    if (lr.height * m.scale_factor != m.latent_h || lr.width * m.scale_factor != m.latent_w ||
        lr.channels != m.latent_channels)
        throw ConfigError("sample: LR " + std::to_string(lr.height) + "x" + std::to_string(lr.width) + "x" +
                          std::to_string(lr.channels) + " does not match the model (HR " + std::to_string(m.latent_h) +
                          "x" + std::to_string(m.latent_w) + ", scale " + std::to_string(m.scale_factor) + ")");
    const DiffusionSchedule schedule{cfg.sample.steps};
    const ImageBuffer out = sample(model, lr, {}, schedule, cfg.sample.seed);
    write_image(cfg.paths.output, out);
    if (cfg.sample.dump_attention) {
        NoGradGuard guard;
        CounterRng rng(cfg.sample.seed, 0, stage_id::sample_noise);
        const Tensor<float> z = gaussian_tensor<float>({m.latent_h, m.latent_w, m.latent_channels}, rng);
        ForwardOptions opts;
        opts.record = true;
        const auto res = model.forward(z, model.encode_lr(lr), {}, schedule.grid()[0], opts);
        NamedTensors<float> items;
        for (std::size_t b = 0; b < res.records.size(); ++b) {
            const auto& r = res.records[b];
            std::vector<float> seg(r.segments.begin(), r.segments.end());
            items.emplace_back("block" + std::to_string(b) + ".segments", Tensor<float>({seg.size()}, seg));
            for (std::size_t h = 0; h < r.maps.size(); ++h)
                items.emplace_back("block" + std::to_string(b) + ".head" + std::to_string(h), r.maps[h]);
        }
        detail::ensure_dir(cfg.paths.report_dir);
        write_tensor_file((fs::path(cfg.paths.report_dir) / "attention.bin").string(), items);
    }
    log_info("sample: wrote " + cfg.paths.output);
    return out;
}

/// Matched-seed training of ablate.variants; writes report_dir/ablation.{csv,txt}.
inline AblationReport cmd_ablate(const RunConfig& cfg) {
    cfg.validate();
    const DataSplit data = load_split(cfg);
    AblationConfig ab = cfg.ablation();
    AblationReport report;
    for (auto id : ab.variants) {
        log_info("ablate: training " + std::string(to_string(id)));
        report.rows.push_back(train_and_evaluate<float>(VariantSpec::of(id), ab, data));
    }
    const fs::path dir = cfg.paths.report_dir;
    detail::write_text(dir / "ablation.csv", report.to_csv());
    detail::write_text(dir / "ablation.txt", report.to_table());
    return report;
}

struct AttnSummary {
    std::vector<RegionStats> regions;  // averaged over the probe batch
    std::vector<DepthPoint> depth;
};

namespace stage_id {
inline constexpr std::uint64_t attn_probe = hash_name("attn.probe");
}  // namespace stage_id

/// Attention records of a fixed probe batch: the first `count` held-out pairs at
/// Z_t = forward_noise(z0, eps, t), eps keyed by (sample.seed, pair index).
template <class T>
std::vector<std::vector<AttentionRecord<T>>> probe_records(const Model<T>& model, const std::vector<SamplePair>& pairs,
                                                           std::size_t count, double t, std::uint64_t seed) {
    if (pairs.empty()) throw ConfigError("attention probe: no pairs");
    NoGradGuard guard;
    std::vector<std::vector<AttentionRecord<T>>> out;
    const auto& c = model.config();
    for (std::size_t i = 0; i < std::min(count, pairs.size()); ++i) {
        const auto& p = pairs[i];
        const Tensor<T> z0 = encode_latent<T>(p.hr);
        CounterRng rng(seed, p.index, stage_id::attn_probe);
        const Tensor<T> eps = gaussian_tensor<T>({c.latent_h, c.latent_w, c.latent_channels}, rng);
        ForwardOptions opts;
        opts.record = true;
        auto res = model.forward(forward_noise(z0, eps, t), model.encode_lr(p.lr), p.tags, t, opts);
        out.push_back(std::move(res.records));
    }
    return out;
}

inline constexpr std::size_t kAttnProbeCount = 4;
inline constexpr double kAttnProbeTime = 0.5;

/// Region statistics and the X->L depth curve on the held-out probe batch; with an
/// empty paths.checkpoint the freshly initialized model is probed. Writes
/// attn_regions.csv, attn_depth.csv and attn/block<b>_head<h>.pgm under report_dir.
inline AttnSummary cmd_attn(const RunConfig& cfg) {
    cfg.validate();
    if (!VariantSpec::of(cfg.model.variant).lr_integration)
        throw ConfigError("attn: variant " + std::string(to_string(cfg.model.variant)) +
                          " has no LR tokens in its attention");
    const DataSplit data = load_split(cfg);
    Model<float> model = make_model(cfg);
    if (!cfg.paths.checkpoint.empty()) load_checkpoint(cfg.paths.checkpoint, model);
    const auto batch = probe_records(model, data.heldout, kAttnProbeCount, kAttnProbeTime, cfg.sample.seed);

    AttnSummary out;
    std::map<std::tuple<std::size_t, std::size_t, std::string>, std::size_t> slot;
    for (const auto& recs : batch)
        for (const auto& s : region_stats(recs)) {
            const auto key = std::make_tuple(s.block, s.head, s.region);
            auto it = slot.find(key);
            if (it == slot.end()) {
                slot.emplace(key, out.regions.size());
                out.regions.push_back(s);
            } else {
                auto& a = out.regions[it->second];
                a.mass += s.mass;
                a.diagonal += s.diagonal;
                a.off_diagonal += s.off_diagonal;
                a.entropy += s.entropy;
            }
        }
    const double n = static_cast<double>(batch.size());
    for (auto& r : out.regions) {
        r.mass /= n;
        r.diagonal /= n;
        r.off_diagonal /= n;
        r.entropy /= n;
    }
    out.depth = depth_decay_curve(batch);

    const fs::path dir = cfg.paths.report_dir;
    std::ostringstream reg, dep;
    reg << std::setprecision(17) << "block,head,region,mass,diagonal,off_diagonal,entropy\n";
    for (const auto& r : out.regions)
        reg << r.block << ',' << r.head << ',' << r.region << ',' << r.mass << ',' << r.diagonal << ','
            << r.off_diagonal << ',' << r.entropy << '\n';
    dep << std::setprecision(17) << "block,diagonal,off_diagonal\n";
    for (const auto& d : out.depth) dep << d.block << ',' << d.diagonal << ',' << d.off_diagonal << '\n';
    detail::write_text(dir / "attn_regions.csv", reg.str());
    detail::write_text(dir / "attn_depth.csv", dep.str());
    detail::ensure_dir(dir / "attn");
    for (std::size_t b = 0; b < batch[0].size(); ++b)
        for (std::size_t h = 0; h < batch[0][b].maps.size(); ++h)
            write_image((dir / "attn" / ("block" + std::to_string(b) + "_head" + std::to_string(h) + ".pgm")).string(),
                        attention_map_image(batch[0][b].maps[h]));
    return out;
}

/// Finite-difference report for every op, block_forward and model.forward.
inline GradcheckReport cmd_gradcheck(const RunConfig& cfg) {
    GradcheckOptions opt;
    opt.seed = cfg.train.seed;
    return run_gradcheck(opt);
}

}  // namespace dit4sr
