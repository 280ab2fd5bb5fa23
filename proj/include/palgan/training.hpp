#pragma once

// Joint training of the palette encoder, assignment generator and
// discriminator, with teacher forcing on the palette annealed by tau.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <memory>
#include <sstream>
#include <string>

#include "palgan/losses.hpp"
#include "palgan/model.hpp"
#include "palgan/optim.hpp"

namespace palgan {

/// tau = 1 - step / total.
inline double tau_schedule(std::int64_t step, std::int64_t total_steps) {
    if (total_steps < 1) throw ValidationError("tau_schedule: total_steps must be positive");
    if (step < 0 || step > total_steps)
        throw ValidationError("tau_schedule: step " + std::to_string(step) + " outside [0, " + std::to_string(total_steps) + "]");
    return 1.0 - static_cast<double>(step) / static_cast<double>(total_steps);
}

/// Draws p ~ U[tau, 1] and reports whether the ground-truth palette is used (p > 0.8).
inline bool draw_teacher_forcing(double tau, std::mt19937_64& rng) {
    if (!(tau >= 0.0 && tau <= 1.0)) throw ValidationError("tau must lie in [0,1]");
    const double p = tau + (1.0 - tau) * (1.0 - uniform_unit(rng));  // (1 - U) lies in (0,1], so tau = 1 gives p = 1
    return p > 0.8;
}

/// Closed-form probability that draw_teacher_forcing returns true.
inline double teacher_forcing_probability(double tau) {
    if (!(tau >= 0.0 && tau <= 1.0)) throw ValidationError("tau must lie in [0,1]");
    return tau >= 0.8 ? 1.0 : 0.2 / (1.0 - tau);
}

inline PaletteHistogram mix_palette(const PaletteHistogram& h_gt, const PaletteHistogram& h_pred, double tau,
                                    std::mt19937_64& rng) {
    detail::require_same_grid(h_gt, h_pred);
    return draw_teacher_forcing(tau, rng) ? h_gt : h_pred;
}

struct LossReport {
    std::int64_t step = 0;  // 1-based index of the step just taken
    std::int64_t epoch = 0;
    double tau = 1.0;
    double palette_total = 0;
    double palette_reconstruction = 0;
    double palette_entropy = 0;
    double generator_total = 0;
    double regression = 0;
    double output_palette = 0;
    double adversarial = 0;
    double discriminator = 0;
    double teacher_forcing = 0;  // fraction of the batch conditioned on h_gt

    static std::string csv_header() {
        return "step,epoch,tau,palette_total,palette_reconstruction,palette_entropy,generator_total,regression,"
               "output_palette,adversarial,discriminator,teacher_forcing";
    }

    std::string csv_row() const {
        std::ostringstream os;
        os.precision(9);
        os << step << ',' << epoch << ',' << tau << ',' << palette_total << ',' << palette_reconstruction << ','
           << palette_entropy << ',' << generator_total << ',' << regression << ',' << output_palette << ','
           << adversarial << ',' << discriminator << ',' << teacher_forcing;
        return os.str();
    }
};

namespace detail {

template <class T>
double finite_or_throw(const Var<T>& v, const char* term, std::int64_t step) {
    const double x = static_cast<double>(v.item());
    if (!std::isfinite(x)) {
        std::ostringstream os;
        os << "non-finite " << term << " loss (" << x << ") at step " << step;
        throw NumericalError(term, os.str());
    }
    return x;
}

template <class T>
std::vector<std::pair<std::string, Var<T>>> named_parameters(std::initializer_list<const ParameterSet<T>*> sets) {
    std::vector<std::pair<std::string, Var<T>>> out;
    for (const auto* s : sets)
        for (const auto& p : s->parameters()) out.emplace_back(p.name, p.var);
    return out;
}

}  // namespace detail

template <class T>
class Trainer {
public:
    explicit Trainer(const TrainConfig& cfg)
        : cfg_(cfg), model_(std::make_unique<PalGanModel<T>>(cfg)), rng_(mix_seed(cfg.seed, 2)) {
        opt_g_ = Adam<T>(detail::named_parameters<T>({&model_->encoder_params, &model_->generator_params}),
                         {cfg.lr_generator, cfg.adam_beta1, cfg.adam_beta2, 1e-8});
        opt_d_ = Adam<T>(detail::named_parameters<T>({&model_->discriminator_params}),
                         {cfg.lr_discriminator, cfg.adam_beta1, cfg.adam_beta2, 1e-8});
    }

    const TrainConfig& config() const noexcept { return cfg_; }
    PalGanModel<T>& model() noexcept { return *model_; }
    const PalGanModel<T>& model() const noexcept { return *model_; }
    Adam<T>& generator_optimizer() noexcept { return opt_g_; }
    Adam<T>& discriminator_optimizer() noexcept { return opt_d_; }
    std::mt19937_64& rng() noexcept { return rng_; }
    std::int64_t step() const noexcept { return step_; }
    std::int64_t total_steps() const noexcept { return total_steps_; }
    void set_total_steps(std::int64_t n) {
        if (n < 1) throw ValidationError("total_steps must be positive");
        total_steps_ = n;
    }
    bool finished() const noexcept { return total_steps_ > 0 && step_ >= total_steps_; }

    std::int64_t steps_per_epoch(std::size_t dataset_size) const {
        return static_cast<std::int64_t>(dataset_size / static_cast<std::size_t>(cfg_.batch_size));
    }

    /// Fixes the tau horizon for a dataset, unless already fixed (resume).
    void plan(std::size_t dataset_size) {
        const auto spe = steps_per_epoch(dataset_size);
        if (spe < 1)
            throw ValidationError("dataset has " + std::to_string(dataset_size) + " images, fewer than batch_size " +
                                  std::to_string(cfg_.batch_size));
        if (total_steps_ == 0) set_total_steps(cfg_.max_steps > 0 ? cfg_.max_steps : cfg_.epochs * spe);
    }

    /// One joint update on an explicit batch.
    LossReport train_step(const Batch& batch) {
        if (batch.gray.empty() || batch.gray.size() != batch.chroma.size())
            throw ValidationError("train_step: batch needs matching, non-empty gray and chroma lists");
        if (total_steps_ == 0) throw ValidationError("train_step: call plan() or set_total_steps() first");
        if (finished()) throw ValidationError("train_step: training already reached total_steps");
        const int n = static_cast<int>(batch.gray.size());
        const auto grid = cfg_.grid();
        const auto& w = cfg_.weights;
        auto& enc = model_->encoder();
        auto& gen = model_->generator();
        auto& disc = model_->discriminator();

        LossReport r;
        r.tau = tau_schedule(step_, total_steps_);
        r.step = step_ + 1;

        Var<T> gray(to_tensor<T>(std::span<const GrayImage>(batch.gray)));
        Var<T> chroma(to_tensor<T>(std::span<const ChromaMap>(batch.chroma)));
        Var<T> h_gt, rgb_real;
        {
            NoGradGuard guard;
            h_gt = ops::soft_histogram(chroma, grid);
            rgb_real = ops::lab_to_rgb(gray, chroma);
        }
        std::vector<bool> take_gt(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) take_gt[static_cast<std::size_t>(i)] = draw_teacher_forcing(r.tau, rng_);
        Var<T> z(model_->sample_latent(n, rng_));

        const auto train = ForwardMode::train();
        const auto frozen = ForwardMode::frozen_train();
        auto e = enc.forward(gray, train);
        auto h_in = ops::select_rows(h_gt, e.palette, take_gt);
        auto c_pred = gen.forward(gray, h_in, z, e.semantic_features, train);
        auto h_cond = ops::detach(h_in);

        // discriminator
        auto c_fake = ops::detach(c_pred);
        opt_d_.zero_grad();
        auto d_real = disc.forward(chroma, rgb_real, h_gt, train);
        auto d_fake = disc.forward(c_fake, ops::lab_to_rgb(gray, c_fake), h_cond, frozen);
        auto loss_d = discriminator_loss(d_real.score, d_fake.score);
        r.discriminator = detail::finite_or_throw(loss_d, "discriminator", r.step);
        backward(loss_d);
        opt_d_.step();

        // palette encoder + assignment generator
        opt_g_.zero_grad();
        auto d_gen = disc.forward(c_pred, ops::lab_to_rgb(gray, c_pred), h_cond, frozen);
        auto pl = palette_loss(h_gt, e.palette, w);
        auto gl = generator_loss(chroma, c_pred, h_gt, d_gen.score, grid, w);
        r.palette_reconstruction = detail::finite_or_throw(pl.reconstruction, "palette_reconstruction", r.step);
        r.palette_entropy = detail::finite_or_throw(pl.entropy, "palette_entropy", r.step);
        r.regression = detail::finite_or_throw(gl.regression, "regression", r.step);
        r.output_palette = detail::finite_or_throw(gl.reconstruction, "output_palette", r.step);
        r.adversarial = detail::finite_or_throw(gl.adversarial, "adversarial", r.step);
        r.palette_total = detail::finite_or_throw(pl.total, "palette_total", r.step);
        r.generator_total = detail::finite_or_throw(gl.total, "generator_total", r.step);
        backward(ops::add(pl.total, gl.total));
        opt_g_.step();
        opt_d_.zero_grad();  // the generator pass also reached D's parameters

        std::size_t forced = 0;
        for (bool b : take_gt) forced += b;
        r.teacher_forcing = static_cast<double>(forced) / n;
        ++step_;
        return r;
    }

    /// Loads the batch for the current step (order is a function of seed and
    /// epoch only) and trains on it.
    LossReport run_step(const DatasetIndex& index) {
        plan(index.size());
        const auto spe = steps_per_epoch(index.size());
        const std::int64_t epoch = step_ / spe;
        if (epoch != order_epoch_) {
            order_ = batches(index.size(), cfg_.batch_size, Split::train, cfg_.seed, static_cast<std::uint64_t>(epoch));
            order_epoch_ = epoch;
        }
        const auto& items = order_[static_cast<std::size_t>(step_ % spe)];
        auto report = train_step(load_batch(index, items, cfg_.crop_size, cfg_.seed, static_cast<std::uint64_t>(epoch)));
        report.epoch = epoch;
        return report;
    }

    void save(const std::string& path) const;
    static std::unique_ptr<Trainer> load(const std::string& path);

private:
    TrainConfig cfg_;
    std::unique_ptr<PalGanModel<T>> model_;
    Adam<T> opt_g_;
    Adam<T> opt_d_;
    std::mt19937_64 rng_;
    std::int64_t step_ = 0;
    std::int64_t total_steps_ = 0;
    std::int64_t order_epoch_ = -1;
    std::vector<std::vector<std::size_t>> order_;
};

// ---- checkpoint container
//
// "PALG" | u32 format | u64 step | u32 block count | blocks
// block: u32 name length | name | u8 dtype | u32 rank | u64 dims[rank] | data
// All integers and floats are little-endian.

inline constexpr std::uint32_t kCheckpointFormat = 1;

enum class BlockType : std::uint8_t { f32 = 1, f64 = 2, bytes = 3, u64 = 4 };

struct CheckpointBlock {
    BlockType type = BlockType::bytes;
    Shape shape;
    std::vector<unsigned char> data;

    std::size_t element_size() const {
        switch (type) {
            case BlockType::f32: return 4;
            case BlockType::f64:
            case BlockType::u64: return 8;
            case BlockType::bytes: return 1;
        }
        throw FormatError("checkpoint: unknown block type");
    }
};

namespace detail {

template <class U>
void put_le(std::string& out, U value) {
    unsigned char bytes[sizeof(U)];
    std::memcpy(bytes, &value, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(U));
    out.append(reinterpret_cast<const char*>(bytes), sizeof(U));
}

template <class U>
U get_le(const unsigned char* p) {
    unsigned char bytes[sizeof(U)];
    std::memcpy(bytes, p, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(U));
    U v;
    std::memcpy(&v, bytes, sizeof(U));
    return v;
}

template <class T>
CheckpointBlock tensor_block(const Tensor<T>& t) {
    CheckpointBlock b;
    b.type = std::is_same_v<T, float> ? BlockType::f32 : BlockType::f64;
    b.shape = t.shape();
    std::string raw;
    for (T v : t.values()) put_le(raw, v);
    b.data.assign(raw.begin(), raw.end());
    return b;
}

inline CheckpointBlock bytes_block(const std::string& s) {
    CheckpointBlock b;
    b.type = BlockType::bytes;
    b.shape = {static_cast<int>(s.size())};
    b.data.assign(s.begin(), s.end());
    return b;
}

inline CheckpointBlock u64_block(std::uint64_t v) {
    CheckpointBlock b;
    b.type = BlockType::u64;
    b.shape = {1};
    std::string raw;
    put_le(raw, v);
    b.data.assign(raw.begin(), raw.end());
    return b;
}

template <class T>
void read_tensor_block(const std::map<std::string, CheckpointBlock>& blocks, const std::string& name, Tensor<T>& dst) {
    auto it = blocks.find(name);
    if (it == blocks.end()) throw FormatError("checkpoint: missing block '" + name + "'");
    const auto& b = it->second;
    if (b.shape != dst.shape())
        throw FormatError("checkpoint: block '" + name + "' has shape " + shape_string(b.shape) + ", model expects " +
                          shape_string(dst.shape()));
    if (b.type == BlockType::f32) {
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(get_le<float>(b.data.data() + 4 * i));
    } else if (b.type == BlockType::f64) {
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(get_le<double>(b.data.data() + 8 * i));
    } else {
        throw FormatError("checkpoint: block '" + name + "' is not a float tensor");
    }
}

inline const CheckpointBlock& require_block(const std::map<std::string, CheckpointBlock>& blocks, const std::string& name,
                                            BlockType type) {
    auto it = blocks.find(name);
    if (it == blocks.end()) throw FormatError("checkpoint: missing block '" + name + "'");
    if (it->second.type != type) throw FormatError("checkpoint: block '" + name + "' has the wrong type");
    return it->second;
}

}  // namespace detail

struct CheckpointFile {
    std::uint32_t format = kCheckpointFormat;
    std::uint64_t step = 0;
    std::map<std::string, CheckpointBlock> blocks;
};

inline void write_checkpoint_file(const std::string& path, const CheckpointFile& file) {
    std::string out = "PALG";
    detail::put_le(out, file.format);
    detail::put_le(out, file.step);
    detail::put_le(out, static_cast<std::uint32_t>(file.blocks.size()));
    for (const auto& [name, b] : file.blocks) {
        detail::put_le(out, static_cast<std::uint32_t>(name.size()));
        out += name;
        detail::put_le(out, static_cast<std::uint8_t>(b.type));
        detail::put_le(out, static_cast<std::uint32_t>(b.shape.size()));
        for (int d : b.shape) detail::put_le(out, static_cast<std::uint64_t>(d));
        out.append(reinterpret_cast<const char*>(b.data.data()), b.data.size());
    }
    const std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw IoError("cannot write checkpoint " + path);
        os.write(out.data(), static_cast<std::streamsize>(out.size()));
        if (!os) throw IoError("cannot write checkpoint " + path);
    }
    std::filesystem::rename(tmp, path);
}

namespace detail {

struct ByteReader {
    const std::vector<unsigned char>& buf;
    const std::string& path;
    std::size_t pos = 0;

    void need(std::size_t n) const {
        if (buf.size() - pos < n) throw FormatError("checkpoint " + path + " is truncated");
    }

    template <class U>
    U take() {
        need(sizeof(U));
        U v = get_le<U>(buf.data() + pos);
        pos += sizeof(U);
        return v;
    }
};

}  // namespace detail

inline CheckpointFile read_checkpoint_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint " + path);
    const std::vector<unsigned char> buf((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    if (buf.size() < 4 || std::memcmp(buf.data(), "PALG", 4) != 0)
        throw FormatError(path + " is not a checkpoint (bad magic bytes)");
    detail::ByteReader in{buf, path, 4};
    CheckpointFile file;
    file.format = in.take<std::uint32_t>();
    if (file.format != kCheckpointFormat)
        throw FormatError("checkpoint " + path + " has format version " + std::to_string(file.format) +
                          "; this build reads version " + std::to_string(kCheckpointFormat));
    file.step = in.take<std::uint64_t>();
    const auto count = in.take<std::uint32_t>();
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto len = in.take<std::uint32_t>();
        in.need(len);
        std::string name(reinterpret_cast<const char*>(buf.data() + in.pos), len);
        in.pos += len;
        CheckpointBlock b;
        const auto type = in.take<std::uint8_t>();
        if (type < 1 || type > 4) throw FormatError("checkpoint: block '" + name + "' has unknown type");
        b.type = static_cast<BlockType>(type);
        const auto rank = in.take<std::uint32_t>();
        if (rank > 8) throw FormatError("checkpoint: block '" + name + "' has implausible rank");
        std::size_t elements = 1;
        for (std::uint32_t r = 0; r < rank; ++r) {
            const auto d = in.take<std::uint64_t>();
            if (d > (1ULL << 31)) throw FormatError("checkpoint: block '" + name + "' has implausible shape");
            b.shape.push_back(static_cast<int>(d));
            elements *= d;
        }
        const std::size_t bytes = elements * b.element_size();
        in.need(bytes);
        const auto first = buf.begin() + static_cast<std::ptrdiff_t>(in.pos);
        b.data.assign(first, first + static_cast<std::ptrdiff_t>(bytes));
        in.pos += bytes;
        if (!file.blocks.emplace(std::move(name), std::move(b)).second) throw FormatError("checkpoint: duplicate block");
    }
    if (in.pos != buf.size()) throw FormatError("checkpoint " + path + " has trailing bytes");
    return file;
}

template <class T>
void Trainer<T>::save(const std::string& path) const {
    CheckpointFile f;
    f.step = static_cast<std::uint64_t>(step_);
    f.blocks["config"] = detail::bytes_block(config_to_text(cfg_));
    f.blocks["trainer.total_steps"] = detail::u64_block(static_cast<std::uint64_t>(total_steps_));
    std::ostringstream rng_text;
    rng_text << rng_;
    f.blocks["rng"] = detail::bytes_block(rng_text.str());
    for (const auto* ps : {&model_->encoder_params, &model_->generator_params, &model_->discriminator_params}) {
        for (const auto& p : ps->parameters()) f.blocks["param/" + p.name] = detail::tensor_block(p.var.value());
        for (const auto& b : ps->buffers()) f.blocks["buffer/" + b.name] = detail::tensor_block(b.value);
    }
    for (const auto& [tag, opt] : {std::pair{"generator", &opt_g_}, std::pair{"discriminator", &opt_d_}}) {
        const std::string prefix = std::string("adam.") + tag;
        f.blocks[prefix + ".t"] = detail::u64_block(opt->steps());
        for (const auto& s : opt->slots()) {
            f.blocks[prefix + ".m/" + s.name] = detail::tensor_block(s.m);
            f.blocks[prefix + ".v/" + s.name] = detail::tensor_block(s.v);
        }
    }
    write_checkpoint_file(path, f);
}

template <class T>
std::unique_ptr<Trainer<T>> Trainer<T>::load(const std::string& path) {
    const auto f = read_checkpoint_file(path);
    const auto& blocks = f.blocks;
    auto text = [&](const std::string& name) {
        const auto& b = detail::require_block(blocks, name, BlockType::bytes);
        return std::string(b.data.begin(), b.data.end());
    };
    auto u64 = [&](const std::string& name) {
        return detail::get_le<std::uint64_t>(detail::require_block(blocks, name, BlockType::u64).data.data());
    };
    auto trainer = std::make_unique<Trainer<T>>(parse_config(text("config")));
    trainer->step_ = static_cast<std::int64_t>(f.step);
    trainer->total_steps_ = static_cast<std::int64_t>(u64("trainer.total_steps"));
    std::istringstream rng_text(text("rng"));
    rng_text >> trainer->rng_;
    if (!rng_text) throw FormatError("checkpoint: corrupt rng state");
    auto& m = *trainer->model_;
    for (auto* ps : {&m.encoder_params, &m.generator_params, &m.discriminator_params}) {
        for (auto& p : ps->parameters()) detail::read_tensor_block(blocks, "param/" + p.name, p.var.mutable_value());
        for (auto& b : ps->buffers()) detail::read_tensor_block(blocks, "buffer/" + b.name, b.value);
    }
    for (const auto& [tag, opt] : {std::pair{"generator", &trainer->opt_g_}, std::pair{"discriminator", &trainer->opt_d_}}) {
        const std::string prefix = std::string("adam.") + tag;
        opt->set_steps(u64(prefix + ".t"));
        for (auto& s : opt->slots()) {
            detail::read_tensor_block(blocks, prefix + ".m/" + s.name, s.m);
            detail::read_tensor_block(blocks, prefix + ".v/" + s.name, s.v);
        }
    }
    return trainer;
}

}  // namespace palgan
