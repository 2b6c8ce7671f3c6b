#include "csrd/train.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>

#include "csrd/dosesim.hpp"
#include "csrd/json_util.hpp"
#include "csrd/volume_io.hpp"

namespace csrd {

namespace fs = std::filesystem;
using nlohmann::json;

// --------------------------------------------------------------------------
// Config

void TrainConfig::validate() const {
    ConfigIssues issues;
    if (!(lr > 0.0)) issues.add("train.lr must be > 0");
    if (batch_size < 1) issues.add("train.batch_size must be >= 1");
    if (total_iters < 0) issues.add("train.total_iters must be >= 0");
    if (!(ema_decay >= 0.0 && ema_decay < 1.0)) issues.add("train.ema_decay must lie in [0, 1)");
    if (checkpoint_every < 1) issues.add("train.checkpoint_every must be >= 1");
    const int m = model.spatial_multiple();
    for (int a = 0; a < 3; ++a)
        if (patch_size[a] < 1 || patch_size[a] % m != 0)
            issues.add("train.patch_size " + to_string(patch_size) + " must be a positive multiple of " +
                       std::to_string(m) + " on every axis");
    if (model.patch_size != patch_size) issues.add("model.patch_size must equal train.patch_size");
    if (model.use_mr != use_mr) issues.add("model.use_mr must equal train.use_mr");
    try {
        model.validate();
    } catch (const ConfigError& e) {
        issues.add(e.what());
    }
    try {
        schedule.validate();
    } catch (const Error& e) {
        issues.add(e.what());
    }
    issues.throw_if_any("invalid train config");
}

TrainConfig train_preset(const std::string& name) {
    TrainConfig c;
    if (name == "phantom") {
        c.batch_size = 4;
        c.total_iters = 5000;
        c.patch_size = {16, 16, 16};
        c.model.base_channels = 8;
        c.model.depth = 3;
        c.model.channel_mult = {1, 2, 4};
        c.checkpoint_every = 1000;
    } else if (name == "paper") {
        c.batch_size = 16;
        c.total_iters = 65000;
        c.patch_size = {64, 64, 64};
        c.model.base_channels = 64;
        c.model.depth = 3;
        c.model.channel_mult = {1, 2, 4};
        c.checkpoint_every = 5000;
    } else {
        throw ConfigError("unknown train preset '" + name + "' (expected phantom or paper)");
    }
    c.model.patch_size = c.patch_size;
    c.model.use_mr = c.use_mr;
    return c;
}

json to_json(const TrainConfig& c) {
    return {{"lr", c.lr},
            {"batch_size", c.batch_size},
            {"total_iters", c.total_iters},
            {"patch_size", vec_json(c.patch_size)},
            {"ema_decay", c.ema_decay},
            {"seed", c.seed},
            {"use_mr", c.use_mr},
            {"dataset_manifest", c.dataset_manifest.string()},
            {"checkpoint_every", c.checkpoint_every},
            {"model", to_json(c.model)},
            {"schedule", to_json(c.schedule)}};
}

TrainConfig train_config_from_json(const json& j, const TrainConfig& base) {
    ConfigIssues issues;
    reject_unknown_keys(j, {"lr", "batch_size", "total_iters", "patch_size", "ema_decay", "seed", "use_mr",
                            "dataset_manifest", "checkpoint_every", "model", "schedule"},
                        "train", issues);

    TrainConfig c = base;
    read_field(j, "lr", c.lr, "train", issues);
    read_field(j, "batch_size", c.batch_size, "train", issues);
    read_field(j, "total_iters", c.total_iters, "train", issues);
    read_field(j, "patch_size", c.patch_size, "train", issues);
    read_field(j, "ema_decay", c.ema_decay, "train", issues);
    read_field(j, "seed", c.seed, "train", issues);
    read_field(j, "use_mr", c.use_mr, "train", issues);
    read_field(j, "checkpoint_every", c.checkpoint_every, "train", issues);
    std::string manifest = c.dataset_manifest.string();
    read_field(j, "dataset_manifest", manifest, "train", issues);
    c.dataset_manifest = manifest;

    // Sections are parsed even after earlier problems so that one pass
    // reports everything wrong with the document.
    const auto collect = [&](auto&& fn) {
        try {
            fn();
        } catch (const ConfigError& e) {
            issues.add(e.what());
        } catch (const json::exception& e) {
            issues.add(e.what());
        }
    };

    // The model section inherits use_mr and patch_size from the train section
    // unless it names them itself.
    collect([&] {
        json model = to_json(base.model);
        if (j.contains("model")) {
            if (!j["model"].is_object()) throw ConfigError("train.model must be a JSON object");
            for (const auto& [k, v] : j["model"].items()) model[k] = v;
        }
        if (!(j.contains("model") && j["model"].contains("use_mr"))) model["use_mr"] = c.use_mr;
        if (!(j.contains("model") && j["model"].contains("patch_size"))) model["patch_size"] = vec_json(c.patch_size);
        model.erase("in_channels");
        if (j.contains("model") && j["model"].contains("in_channels")) model["in_channels"] = j["model"]["in_channels"];
        c.model = model_config_from_json(model);
    });
    collect([&] {
        json sched = to_json(base.schedule);
        if (j.contains("schedule")) {
            if (!j["schedule"].is_object()) throw ConfigError("train.schedule must be a JSON object");
            for (const auto& [k, v] : j["schedule"].items()) sched[k] = v;
        }
        c.schedule = schedule_from_json(sched);
    });
    collect([&] { c.validate(); });
    issues.throw_if_any("invalid train config");
    return c;
}

// --------------------------------------------------------------------------
// Dataset

namespace {

Volume3D read_entry(const fs::path& dir, const json& file, const std::string& what) {
    if (!file.is_string()) throw ManifestError(what + ": file entry is not a string");
    const fs::path p = dir / file.get<std::string>();
    if (!fs::exists(p)) throw ManifestError(what + ": missing file '" + p.string() + "'");
    Volume3D v = read_rv3d(p);
    try {
        v.validate();
    } catch (const Error& e) {
        throw ManifestError(what + ": " + e.what());
    }
    return v;
}

} // namespace

TrainingSet TrainingSet::load(const fs::path& manifest_path, bool use_mr, const NoiseSchedule& sched) {
    if (!fs::exists(manifest_path)) throw ManifestError("dataset manifest '" + manifest_path.string() + "' not found");
    json m;
    try {
        std::ifstream is(manifest_path);
        m = json::parse(is);
    } catch (const json::exception& e) {
        throw ManifestError("cannot parse '" + manifest_path.string() + "': " + e.what());
    }
    if (!m.contains("cases") || !m.contains("residual_std"))
        throw ManifestError("dataset manifest lacks 'cases' or 'residual_std'");
    const double residual_std = m["residual_std"].get<double>();
    if (!(residual_std > 0.0)) throw ManifestError("dataset residual_std must be > 0");
    const fs::path dir = manifest_path.parent_path();

    std::vector<TrainingPair> pairs;
    const double to_model = sched.sigma_data / residual_std;
    for (const auto& cs : m["cases"]) {
        if (cs.value("split", "") != "train") continue;
        const std::string id = cs.at("id").get<std::string>();
        const double scale = cs.at("scale").get<double>();
        const Volume3D nor = normalize_counts(read_entry(dir, cs["nor"], id + " nor"), scale);
        std::optional<GridF> mr;
        if (use_mr) {
            Volume3D mv = read_entry(dir, cs["mr"], id + " mr");
            if (mv.shape() != nor.shape())
                throw ManifestError(id + ": mr shape " + to_string(mv.shape()) + " differs from nor " +
                                    to_string(nor.shape()));
            mr = std::move(mv.data);
        }
        for (const auto& [tag, entry] : cs.at("low").items()) {
            const double factor = entry.at("factor").get<double>();
            const Volume3D low =
                normalize_counts(read_entry(dir, entry["file"], id + " low" + tag), scale, factor);
            if (low.shape() != nor.shape())
                throw ManifestError(id + ": low" + tag + " shape " + to_string(low.shape()) + " differs from nor " +
                                    to_string(nor.shape()));
            TrainingPair p;
            p.case_id = id;
            p.factor = factor;
            p.vol.residual = GridF(nor.shape());
            for (std::size_t i = 0; i < nor.data.size(); ++i)
                p.vol.residual[i] = static_cast<float>(
                    (static_cast<double>(low.data[i]) - static_cast<double>(nor.data[i])) * to_model);
            p.vol.low = low.data;
            p.vol.mr = mr;
            pairs.push_back(std::move(p));
        }
    }
    if (pairs.empty()) throw ManifestError("dataset manifest lists no training pairs");
    TrainingSet s = from_pairs(std::move(pairs), residual_std / sched.sigma_data);
    s.manifest_hash_ = hex64(hash_file(manifest_path));
    return s;
}

TrainingSet TrainingSet::from_pairs(std::vector<TrainingPair> pairs, double residual_scale) {
    if (pairs.empty()) throw ManifestError("training set is empty");
    TrainingSet s;
    std::map<std::string, std::size_t> index;
    std::vector<std::string> order;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        const auto& id = pairs[i].case_id;
        auto it = index.find(id);
        if (it == index.end()) {
            it = index.emplace(id, s.by_volume_.size()).first;
            s.by_volume_.emplace_back();
        }
        s.by_volume_[it->second].push_back(i);
    }
    s.pairs_ = std::move(pairs);
    s.residual_scale_ = residual_scale;
    return s;
}

TrainingDraw TrainingSet::draw(const SeedStream& s, const Vec3i& patch, const NoiseSchedule& sched) const {
    Rng rng = s.engine();
    TrainingDraw d;
    d.volume = std::uniform_int_distribution<std::size_t>(0, by_volume_.size() - 1)(rng);
    const auto& members = by_volume_[d.volume];
    d.pair = members[std::uniform_int_distribution<std::size_t>(0, members.size() - 1)(rng)];
    const Vec3i shape = pairs_[d.pair].vol.low.shape();
    d.region.parent = shape;
    d.region.size = patch;
    for (int a = 0; a < 3; ++a) {
        if (patch[a] > shape[a])
            throw DimensionError("patch " + to_string(patch) + " exceeds volume " + to_string(shape));
        d.region.origin[a] = std::uniform_int_distribution<int>(0, shape[a] - patch[a])(rng);
    }
    d.sigma = sample_training_sigma(rng, sched);
    d.noise = s.child(1);
    return d;
}

TrainingBatch make_batch(const TrainingSet& data, const TrainConfig& cfg, long long iter) {
    const SeedStream it = SeedStream(cfg.seed).child(static_cast<std::uint64_t>(iter));
    const int B = cfg.batch_size;
    const int K = condition_channels(cfg.use_mr);
    TrainingBatch b;
    b.y = nn::Tensor<float>(B, 1, cfg.patch_size);
    b.noise = nn::Tensor<float>(B, 1, cfg.patch_size);
    b.cond = nn::Tensor<float>(B, K, cfg.patch_size);
    const std::size_t V = b.y.voxels();
    for (int i = 0; i < B; ++i) {
        const TrainingDraw d = data.draw(it.child(static_cast<std::uint64_t>(i)), cfg.patch_size, cfg.schedule);
        const TrainingPair& p = data.pairs()[d.pair];
        const GridF r = extract_patch(p.vol.residual, d.region);
        std::copy(r.storage().begin(), r.storage().end(), b.y.sample(i));
        fill_condition(p.vol, d.region, cfg.use_mr, b.cond.sample(i));
        fill_noise(d.noise, d.sigma, b.noise.sample(i), V);
        b.sigma.push_back(d.sigma);
        b.regions.push_back(d.region);
        b.ids.push_back(p.case_id + "@" + factor_tag(p.factor));
    }
    return b;
}

// --------------------------------------------------------------------------
// Optimisation

double train_step(Denoiser<float>& model, nn::Adam<float>& opt, const TrainingBatch& batch,
                  const NoiseSchedule& sched) {
    for (auto* p : model.parameters()) p->zero_grad();
    BatchLoss loss;
    try {
        loss = dsm_loss_batch(model, batch.y, batch.cond, batch.sigma, batch.noise, sched, true, batch.regions);
    } catch (const NumericError& e) {
        std::string ids;
        for (const auto& id : batch.ids) ids += (ids.empty() ? "" : ", ") + id;
        throw NumericError(std::string(e.what()) + " (batch samples: " + ids + ")");
    }
    if (!std::isfinite(loss.mean)) throw NumericError("non-finite batch loss");
    opt.step();
    return loss.mean;
}

// --------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[8] = {'C', 'S', 'R', 'D', 'C', 'K', 'P', '1'};

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_floats(std::string& out, const std::vector<float>& v) {
    put_u64(out, v.size());
    for (float f : v) {
        std::uint32_t u;
        std::memcpy(&u, &f, 4);
        for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((u >> (8 * i)) & 0xff));
    }
}

class Reader {
public:
    explicit Reader(const std::string& s) : s_(s) {}
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(s_[pos_ + i])) << (8 * i);
        pos_ += 8;
        return v;
    }
    void floats(std::vector<float>& dst, const std::string& what) {
        const std::uint64_t n = u64();
        if (n != dst.size())
            throw ManifestError("checkpoint tensor '" + what + "' has " + std::to_string(n) + " values, model expects " +
                                std::to_string(dst.size()));
        need(4 * n);
        for (std::size_t i = 0; i < n; ++i) {
            std::uint32_t u = 0;
            for (int b = 0; b < 4; ++b)
                u |= static_cast<std::uint32_t>(static_cast<unsigned char>(s_[pos_ + 4 * i + b])) << (8 * b);
            std::memcpy(&dst[i], &u, 4);
        }
        pos_ += 4 * n;
    }
    std::string bytes(std::size_t n) {
        need(n);
        std::string out = s_.substr(pos_, n);
        pos_ += n;
        return out;
    }
    bool done() const { return pos_ == s_.size(); }

private:
    void need(std::size_t n) const {
        if (pos_ + n > s_.size()) throw ManifestError("checkpoint blob is truncated");
    }
    const std::string& s_;
    std::size_t pos_ = 0;
};

fs::path with_ext(fs::path stem, const char* ext) {
    if (stem.extension() == ".bin" || stem.extension() == ".json") stem.replace_extension();
    stem += ext;
    return stem;
}

std::string read_bytes(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    if (!is) throw ManifestError("cannot read '" + p.string() + "'");
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

/// The fields that must agree between a checkpoint and the run resuming it.
json resume_identity(const TrainConfig& c) {
    json j = to_json(c);
    j.erase("total_iters");
    j.erase("checkpoint_every");
    j.erase("dataset_manifest");
    return j;
}

} // namespace

void save_checkpoint(const fs::path& stem, const Checkpoint& ck) {
    Checkpoint& mut = const_cast<Checkpoint&>(ck); // parameters() is non-const
    auto params = mut.model.parameters();
    if (!mut.model.has_ema()) throw ConfigError("checkpoint model has no EMA shadow");
    std::string blob(kMagic, kMagic + 8);
    put_u64(blob, params.size());
    for (std::size_t k = 0; k < params.size(); ++k) {
        put_u64(blob, params[k]->name.size());
        blob += params[k]->name;
        put_floats(blob, params[k]->value);
        put_floats(blob, mut.model.ema_values()[k]);
        put_floats(blob, ck.adam_m.empty() ? std::vector<float>(params[k]->size(), 0.f) : ck.adam_m[k]);
        put_floats(blob, ck.adam_v.empty() ? std::vector<float>(params[k]->size(), 0.f) : ck.adam_v[k]);
    }
    put_u64(blob, static_cast<std::uint64_t>(ck.adam_steps));

    const fs::path bin = with_ext(stem, ".bin"), js = with_ext(stem, ".json");
    if (!bin.parent_path().empty()) fs::create_directories(bin.parent_path());
    {
        std::ofstream os(bin, std::ios::binary);
        if (!os) throw IoError("cannot write '" + bin.string() + "'");
        os.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    }
    const json manifest = {{"format", "csrd-checkpoint/1"},
                           {"step", ck.step},
                           {"config", to_json(ck.config)},
                           {"schedule", to_json(ck.config.schedule)},
                           {"normalization",
                            {{"residual_scale", ck.residual_scale}, {"sigma_data", ck.config.schedule.sigma_data}}},
                           {"dataset_hash", ck.dataset_hash},
                           {"parameter_count", mut.model.parameter_count()},
                           {"blob", bin.filename().string()},
                           {"blob_hash", hex64(fnv1a64(blob.data(), blob.size()))}};
    std::ofstream os(js);
    if (!os) throw IoError("cannot write '" + js.string() + "'");
    os << manifest.dump(2) << "\n";
}

Checkpoint load_checkpoint(const fs::path& path) {
    const fs::path js = with_ext(path, ".json");
    json m;
    try {
        std::ifstream is(js);
        if (!is) throw ManifestError("cannot read checkpoint manifest '" + js.string() + "'");
        m = json::parse(is);
    } catch (const json::exception& e) {
        throw ManifestError("cannot parse '" + js.string() + "': " + e.what());
    }
    if (m.value("format", "") != "csrd-checkpoint/1") throw ManifestError("'" + js.string() + "' is not a checkpoint");
    Checkpoint ck;
    ck.config = train_config_from_json(m.at("config"));
    if (schedule_from_json(m.at("schedule")) != ck.config.schedule)
        throw ManifestError("checkpoint schedule disagrees with its config");
    ck.step = m.at("step").get<long long>();
    ck.residual_scale = m.at("normalization").at("residual_scale").get<double>();
    ck.dataset_hash = m.at("dataset_hash").get<std::string>();

    const fs::path bin = js.parent_path() / m.at("blob").get<std::string>();
    const std::string blob = read_bytes(bin);
    if (hex64(fnv1a64(blob.data(), blob.size())) != m.at("blob_hash").get<std::string>())
        throw ManifestError("checkpoint blob '" + bin.string() + "' does not match its recorded hash");
    if (blob.size() < 8 || std::memcmp(blob.data(), kMagic, 8) != 0)
        throw ManifestError("'" + bin.string() + "' is not a checkpoint blob");

    ck.model = ScoreModel(ck.config.model, ck.config.schedule);
    ck.model.enable_ema();
    auto params = ck.model.parameters();
    if (m.at("parameter_count").get<std::size_t>() != ck.model.parameter_count())
        throw ManifestError("checkpoint parameter count disagrees with its model config");
    const std::string body = blob.substr(8);
    Reader r(body);
    if (r.u64() != params.size()) throw ManifestError("checkpoint tensor count disagrees with the model");
    ck.adam_m.resize(params.size());
    ck.adam_v.resize(params.size());
    for (std::size_t k = 0; k < params.size(); ++k) {
        const std::string name = r.bytes(r.u64());
        if (name != params[k]->name)
            throw ManifestError("checkpoint tensor " + std::to_string(k) + " is '" + name + "', model expects '" +
                                params[k]->name + "'");
        r.floats(params[k]->value, name);
        r.floats(ck.model.ema_values()[k], name + " (ema)");
        ck.adam_m[k].resize(params[k]->size());
        ck.adam_v[k].resize(params[k]->size());
        r.floats(ck.adam_m[k], name + " (adam m)");
        r.floats(ck.adam_v[k], name + " (adam v)");
    }
    ck.adam_steps = static_cast<long long>(r.u64());
    if (!r.done()) throw ManifestError("checkpoint blob has trailing bytes");
    return ck;
}

json to_json(const TelemetryRecord& r) {
    return {{"iter", r.iter}, {"loss", r.loss}, {"sigma_mean", r.sigma_mean}, {"lr", r.lr}, {"wallclock", r.wallclock}};
}

// --------------------------------------------------------------------------
// Training loop

TrainResult train(const TrainConfig& cfg, const fs::path& out_dir, const std::optional<fs::path>& resume,
                  const std::function<void(const TelemetryRecord&)>& on_iter) {
    cfg.validate();
    const TrainingSet data = TrainingSet::load(cfg.dataset_manifest, cfg.use_mr, cfg.schedule);

    Checkpoint state;
    state.config = cfg;
    state.residual_scale = data.residual_scale();
    state.dataset_hash = data.manifest_hash();
    if (resume) {
        Checkpoint ck = load_checkpoint(*resume);
        if (resume_identity(ck.config) != resume_identity(cfg))
            throw ManifestError("checkpoint '" + resume->string() + "' was trained with a different config; refusing to resume");
        if (ck.dataset_hash != data.manifest_hash())
            throw ManifestError("checkpoint '" + resume->string() + "' was trained on dataset " + ck.dataset_hash +
                                ", the manifest now hashes to " + data.manifest_hash() + "; refusing to resume");
        if (ck.step > cfg.total_iters)
            throw ConfigError("checkpoint step " + std::to_string(ck.step) + " is past total_iters " +
                              std::to_string(cfg.total_iters));
        state.model = std::move(ck.model);
        state.step = ck.step;
        state.adam_m = std::move(ck.adam_m);
        state.adam_v = std::move(ck.adam_v);
        state.adam_steps = ck.adam_steps;
    } else {
        state.model = ScoreModel(cfg.model, cfg.schedule);
        state.model.enable_ema();
    }

    nn::Adam<float> opt(state.model.parameters(), {cfg.lr, 0.9, 0.999, 1e-8});
    if (resume) {
        opt.first_moments() = state.adam_m;
        opt.second_moments() = state.adam_v;
        opt.set_steps(state.adam_steps);
    }

    fs::create_directories(out_dir / "checkpoints");
    std::ofstream telemetry(out_dir / "telemetry.jsonl", resume ? std::ios::app : std::ios::trunc);
    if (!telemetry) throw IoError("cannot write telemetry in '" + out_dir.string() + "'");

    TrainResult result;
    auto checkpoint = [&](long long step) {
        state.step = step;
        state.adam_m = opt.first_moments();
        state.adam_v = opt.second_moments();
        state.adam_steps = opt.steps();
        char name[32];
        std::snprintf(name, sizeof name, "step_%07lld", step);
        const fs::path stem = out_dir / "checkpoints" / name;
        save_checkpoint(stem, state);
        result.checkpoints.push_back(with_ext(stem, ".json"));
        result.final_checkpoint = result.checkpoints.back();
    };

    const auto t0 = std::chrono::steady_clock::now();
    for (long long it = state.step; it < cfg.total_iters; ++it) {
        const TrainingBatch batch = make_batch(data, cfg, it);
        const double loss = train_step(state.model, opt, batch, cfg.schedule);
        state.model.update_ema(cfg.ema_decay);
        result.losses.push_back(loss);

        TelemetryRecord rec;
        rec.iter = it + 1;
        rec.loss = loss;
        for (double s : batch.sigma) rec.sigma_mean += s / static_cast<double>(batch.sigma.size());
        rec.lr = cfg.lr;
        rec.wallclock = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        telemetry << to_json(rec).dump() << "\n";
        if (on_iter) on_iter(rec);
        if ((it + 1) % cfg.checkpoint_every == 0 && it + 1 < cfg.total_iters) checkpoint(it + 1);
    }
    checkpoint(cfg.total_iters);
    return result;
}

} // namespace csrd
