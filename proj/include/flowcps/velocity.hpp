#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "flowcps/common.hpp"
#include "flowcps/rng.hpp"

namespace flowcps {

/// Exact velocity for a point-mass data distribution at c: v(x, t) = (x - c)/t.
struct DeltaOracle {
    Vec c;
};

/// Exact velocity when the data distribution is N(0, s^2 I) and the noise is
/// N(0, I). Conditioning on x_t gives posterior means
///   E[x0 | x_t] = (1-t) s^2 x_t / ((1-t)^2 s^2 + t^2)
///   E[x1 | x_t] =        t x_t / ((1-t)^2 s^2 + t^2)
/// so the velocity E[x1 - x0 | x_t] is (t - (1-t) s^2) x_t / ((1-t)^2 s^2 + t^2).
struct GaussianOracle {
    double s = 1.0;
    int dim = 2;
};

enum class Activation { Tanh, Relu };

inline const char* activation_name(Activation a) { return a == Activation::Tanh ? "tanh" : "relu"; }

struct MlpArchitecture {
    int dim = 2;                // state dimension D; network input is (x, t), output is D
    std::vector<int> hidden;    // hidden layer widths, at least one layer
    Activation activation = Activation::Tanh;

    void validate() const {
        if (dim < 1) throw std::invalid_argument("MlpArchitecture: dim must be >= 1");
        if (hidden.empty()) throw std::invalid_argument("MlpArchitecture: need at least one hidden layer");
        for (int w : hidden)
            if (w < 1) throw std::invalid_argument("MlpArchitecture: hidden widths must be >= 1");
    }

    int input_dim() const { return dim + 1; }
    int output_dim() const { return dim; }

    std::vector<int> layer_sizes() const {
        std::vector<int> sizes;
        sizes.push_back(input_dim());
        sizes.insert(sizes.end(), hidden.begin(), hidden.end());
        sizes.push_back(output_dim());
        return sizes;
    }

    std::size_t param_count() const {
        const auto sizes = layer_sizes();
        std::size_t n = 0;
        for (std::size_t l = 0; l + 1 < sizes.size(); ++l)
            n += static_cast<std::size_t>(sizes[l + 1]) * (sizes[l] + 1);
        return n;
    }
};

/// Fully connected network with linear output layer. Parameters live in one
/// flat vector (per layer: row-major weights, then biases) so optimizers and
/// serialization can treat the model as a plain array.
class Mlp {
public:
    explicit Mlp(MlpArchitecture arch) : arch_(std::move(arch)) {
        arch_.validate();
        params_.assign(arch_.param_count(), 0.0);
    }

    /// Uniform init in [-a, a] with a = sqrt(1 / fan_in), deterministic in seed.
    static Mlp random_init(MlpArchitecture arch, std::uint64_t seed) {
        Mlp net(std::move(arch));
        Rng rng(seed);
        const auto sizes = net.arch_.layer_sizes();
        std::size_t off = 0;
        for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
            const double a = std::sqrt(1.0 / sizes[l]);
            const std::size_t count = static_cast<std::size_t>(sizes[l + 1]) * (sizes[l] + 1);
            for (std::size_t i = 0; i < count; ++i) net.params_[off + i] = (2.0 * rng.uniform() - 1.0) * a;
            off += count;
        }
        return net;
    }

    const MlpArchitecture& arch() const { return arch_; }
    int dim() const { return arch_.dim; }
    std::vector<double>& params() { return params_; }
    const std::vector<double>& params() const { return params_; }

    /// Stored pre-activations and layer inputs from a forward pass, consumed
    /// by backward().
    struct Workspace {
        std::vector<Vec> inputs;  // inputs[l] feeds layer l; inputs[0] = (x, t)
        std::vector<Vec> pre;     // pre[l] = W_l inputs[l] + b_l
    };

    Vec forward(const Vec& x, double t) const {
        Workspace ws;
        return forward(x, t, ws);
    }

    Vec forward(const Vec& x, double t, Workspace& ws) const {
        if (static_cast<int>(x.size()) != arch_.dim)
            throw std::invalid_argument("Mlp::forward: input dimension mismatch");
        const auto sizes = arch_.layer_sizes();
        const std::size_t layers = sizes.size() - 1;
        ws.inputs.assign(layers, {});
        ws.pre.assign(layers, {});

        Vec a(x);
        a.push_back(t);
        std::size_t off = 0;
        for (std::size_t l = 0; l < layers; ++l) {
            const int n_in = sizes[l];
            const int n_out = sizes[l + 1];
            ws.inputs[l] = a;
            Vec z(static_cast<std::size_t>(n_out));
            for (int o = 0; o < n_out; ++o) {
                const double* w = &params_[off + static_cast<std::size_t>(o) * n_in];
                double acc = params_[off + static_cast<std::size_t>(n_out) * n_in + o];  // bias
                for (int i = 0; i < n_in; ++i) acc += w[i] * a[static_cast<std::size_t>(i)];
                z[static_cast<std::size_t>(o)] = acc;
            }
            ws.pre[l] = z;
            off += static_cast<std::size_t>(n_out) * (n_in + 1);
            if (l + 1 < layers) {
                for (auto& v : z) v = activate(v);
            }
            a = std::move(z);
        }
        return a;
    }

    /// Accumulates d(loss)/d(params) into grad for the output cotangent dy.
    /// grad must have param_count() entries; contributions are added.
    void backward(const Workspace& ws, const Vec& dy, std::vector<double>& grad) const {
        const auto sizes = arch_.layer_sizes();
        const std::size_t layers = sizes.size() - 1;
        if (grad.size() != params_.size()) throw std::invalid_argument("Mlp::backward: grad size mismatch");

        // parameter offsets per layer
        std::vector<std::size_t> offsets(layers);
        std::size_t off = 0;
        for (std::size_t l = 0; l < layers; ++l) {
            offsets[l] = off;
            off += static_cast<std::size_t>(sizes[l + 1]) * (sizes[l] + 1);
        }

        Vec delta = dy;  // d(loss)/d(pre[l]); output layer is linear
        for (std::size_t l = layers; l-- > 0;) {
            const int n_in = sizes[l];
            const int n_out = sizes[l + 1];
            const std::size_t base = offsets[l];
            const Vec& input = ws.inputs[l];
            for (int o = 0; o < n_out; ++o) {
                const double d = delta[static_cast<std::size_t>(o)];
                double* gw = &grad[base + static_cast<std::size_t>(o) * n_in];
                for (int i = 0; i < n_in; ++i) gw[i] += d * input[static_cast<std::size_t>(i)];
                grad[base + static_cast<std::size_t>(n_out) * n_in + o] += d;
            }
            if (l == 0) break;
            Vec prev(static_cast<std::size_t>(n_in), 0.0);
            for (int o = 0; o < n_out; ++o) {
                const double d = delta[static_cast<std::size_t>(o)];
                const double* w = &params_[base + static_cast<std::size_t>(o) * n_in];
                for (int i = 0; i < n_in; ++i) prev[static_cast<std::size_t>(i)] += d * w[i];
            }
            const Vec& z = ws.pre[l - 1];
            for (int i = 0; i < n_in; ++i) prev[static_cast<std::size_t>(i)] *= activate_grad(z[static_cast<std::size_t>(i)]);
            delta = std::move(prev);
        }
    }

private:
    double activate(double z) const { return arch_.activation == Activation::Tanh ? std::tanh(z) : (z > 0.0 ? z : 0.0); }
    double activate_grad(double z) const {
        if (arch_.activation == Activation::Tanh) {
            const double th = std::tanh(z);
            return 1.0 - th * th;
        }
        return z > 0.0 ? 1.0 : 0.0;
    }

    MlpArchitecture arch_;
    std::vector<double> params_;
};

using VelocityField = std::variant<DeltaOracle, GaussianOracle, Mlp>;

inline int field_dim(const VelocityField& f) {
    return std::visit([](const auto& v) -> int {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, DeltaOracle>) return static_cast<int>(v.c.size());
        else if constexpr (std::is_same_v<T, GaussianOracle>) return v.dim;
        else return v.dim();
    }, f);
}

/// Estimated velocity at (x, t).
inline Vec eval_velocity(const VelocityField& f, const Vec& x, double t) {
    if (const auto* d = std::get_if<DeltaOracle>(&f)) {
        if (!(t > 0.0)) throw std::domain_error("eval_velocity: delta oracle is singular at t=0");
        Vec v(x.size());
        for (std::size_t i = 0; i < x.size(); ++i) v[i] = (x[i] - d->c[i]) / t;
        return v;
    }
    if (const auto* g = std::get_if<GaussianOracle>(&f)) {
        const double s2 = g->s * g->s;
        const double denom = (1.0 - t) * (1.0 - t) * s2 + t * t;
        const double coeff = (t - (1.0 - t) * s2) / denom;
        Vec v(x.size());
        for (std::size_t i = 0; i < x.size(); ++i) v[i] = coeff * x[i];
        return v;
    }
    return std::get<Mlp>(f).forward(x, t);
}

/// One supervised regression sample: match the straight-line velocity
/// x1 - x0 at the interpolated state.
struct FmSample {
    Vec x0;
    Vec x1;
    double t = 0.0;
};

/// Mean squared velocity-regression loss over the batch and its exact
/// parameter gradient (reverse mode).
inline std::pair<double, std::vector<double>> fm_loss_and_grad(const VelocityField& f,
                                                               const std::vector<FmSample>& batch) {
    const Mlp* net = std::get_if<Mlp>(&f);
    if (net == nullptr) throw std::invalid_argument("fm_loss_and_grad: only the mlp variant is trainable");
    if (batch.empty()) throw std::invalid_argument("fm_loss_and_grad: empty batch");

    const std::size_t dim = static_cast<std::size_t>(net->dim());
    std::vector<double> grad(net->params().size(), 0.0);
    double loss = 0.0;
    const double scale = 1.0 / static_cast<double>(batch.size());
    Mlp::Workspace ws;
    for (const auto& sample : batch) {
        Vec xt(dim);
        for (std::size_t i = 0; i < dim; ++i) xt[i] = (1.0 - sample.t) * sample.x0[i] + sample.t * sample.x1[i];
        const Vec y = net->forward(xt, sample.t, ws);
        Vec dy(dim);
        for (std::size_t i = 0; i < dim; ++i) {
            const double r = y[i] - (sample.x1[i] - sample.x0[i]);
            loss += r * r * scale;
            dy[i] = 2.0 * r * scale;
        }
        net->backward(ws, dy, grad);
    }
    return {loss, std::move(grad)};
}

/// Distribution of data points x0 for pretraining.
using DataSampler = std::function<Vec(Rng&)>;

struct TrainOptions {
    int batch_size = 256;
    double momentum = 0.9;
};

struct TrainReport {
    double final_loss = 0.0;
    int steps = 0;
};

/// SGD on the velocity-regression loss; deterministic given seed.
inline Mlp train_fm(const MlpArchitecture& arch, const DataSampler& data, int steps, double lr,
                    std::uint64_t seed, const TrainOptions& opts = {}, TrainReport* report = nullptr) {
    if (steps < 1) throw std::invalid_argument("train_fm: steps must be >= 1");
    if (!(lr > 0.0)) throw std::invalid_argument("train_fm: lr must be > 0");
    if (opts.batch_size < 1) throw std::invalid_argument("train_fm: batch_size must be >= 1");

    Mlp net = Mlp::random_init(arch, derive_seed(seed, 0));
    Rng rng(derive_seed(seed, 1));
    const std::size_t dim = static_cast<std::size_t>(arch.dim);
    std::vector<double> velocity(net.params().size(), 0.0);
    double last_loss = 0.0;
    std::vector<FmSample> batch(static_cast<std::size_t>(opts.batch_size));
    for (int step = 0; step < steps; ++step) {
        for (std::size_t j = 0; j < batch.size(); ++j) {
            FmSample& sample = batch[j];
            sample.x0 = data(rng);
            if (sample.x0.size() != dim) throw std::invalid_argument("train_fm: data sampler dimension mismatch");
            sample.x1 = rng.normal_vec(dim);
            // stratify t across the batch; cuts the minibatch gradient noise
            sample.t = (static_cast<double>(j) + rng.uniform()) / static_cast<double>(batch.size());
        }
        auto [loss, grad] = fm_loss_and_grad(net, batch);
        if (!std::isfinite(loss))
            throw std::runtime_error("train_fm: loss became non-finite at step " + std::to_string(step));
        for (std::size_t i = 0; i < grad.size(); ++i) {
            velocity[i] = opts.momentum * velocity[i] + grad[i];
            net.params()[i] -= lr * velocity[i];
        }
        last_loss = loss;
    }
    if (report != nullptr) {
        report->final_loss = last_loss;
        report->steps = steps;
    }
    return net;
}

// ---------------------------------------------------------------------------
// Model file format: one text header line
//   flowcps-mlp dim=<D> hidden=<w1,w2,...> activation=<tanh|relu> params=<N>
// followed by N little-endian float64 values. A plain-text sidecar
// "<path>.meta" records seed, steps and final loss.
// ---------------------------------------------------------------------------

struct ModelMeta {
    std::uint64_t seed = 0;
    int steps = 0;
    double final_loss = 0.0;
};

namespace detail {
inline void write_le_doubles(std::ostream& out, const std::vector<double>& values) {
    for (double v : values) {
        const std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
        char bytes[8];
        for (int b = 0; b < 8; ++b) bytes[b] = static_cast<char>((bits >> (8 * b)) & 0xff);
        out.write(bytes, 8);
    }
}

inline std::vector<double> read_le_doubles(std::istream& in, std::size_t count) {
    std::vector<double> values(count);
    for (auto& v : values) {
        char bytes[8];
        in.read(bytes, 8);
        if (!in) throw std::runtime_error("model file truncated");
        std::uint64_t bits = 0;
        for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[b])) << (8 * b);
        v = std::bit_cast<double>(bits);
    }
    return values;
}
}  // namespace detail

inline void save_model(const Mlp& net, const std::filesystem::path& path, const ModelMeta& meta) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("save_model: cannot open " + path.string());
    out << "flowcps-mlp dim=" << net.arch().dim << " hidden=";
    for (std::size_t i = 0; i < net.arch().hidden.size(); ++i) {
        if (i > 0) out << ',';
        out << net.arch().hidden[i];
    }
    out << " activation=" << activation_name(net.arch().activation) << " params=" << net.params().size() << "\n";
    detail::write_le_doubles(out, net.params());
    if (!out) throw std::runtime_error("save_model: write failed for " + path.string());

    std::ofstream sidecar(path.string() + ".meta");
    sidecar << "seed = " << meta.seed << "\n";
    sidecar << "steps = " << meta.steps << "\n";
    sidecar << "final_loss = " << fmt17(meta.final_loss) << "\n";
}

inline Mlp load_model(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_model: cannot open " + path.string());
    std::string header;
    std::getline(in, header);
    std::istringstream hs(header);
    std::string magic;
    hs >> magic;
    if (magic != "flowcps-mlp") throw std::runtime_error("load_model: bad header in " + path.string());

    MlpArchitecture arch;
    std::size_t declared = 0;
    std::string token;
    while (hs >> token) {
        const auto eq = token.find('=');
        if (eq == std::string::npos) throw std::runtime_error("load_model: malformed header field: " + token);
        const std::string key = token.substr(0, eq);
        const std::string value = token.substr(eq + 1);
        if (key == "dim") {
            arch.dim = std::stoi(value);
        } else if (key == "hidden") {
            std::istringstream vs(value);
            std::string piece;
            while (std::getline(vs, piece, ',')) arch.hidden.push_back(std::stoi(piece));
        } else if (key == "activation") {
            if (value == "tanh") arch.activation = Activation::Tanh;
            else if (value == "relu") arch.activation = Activation::Relu;
            else throw std::runtime_error("load_model: unknown activation: " + value);
        } else if (key == "params") {
            declared = static_cast<std::size_t>(std::stoull(value));
        } else {
            throw std::runtime_error("load_model: unknown header field: " + key);
        }
    }
    Mlp net(arch);
    if (declared != net.params().size())
        throw std::runtime_error("load_model: parameter count mismatch in " + path.string());
    net.params() = detail::read_le_doubles(in, declared);
    return net;
}

}  // namespace flowcps
