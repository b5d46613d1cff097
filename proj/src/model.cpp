#include "codream/model.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "codream/rng.hpp"

namespace codream {

void ArchitectureSpec::validate() const {
    if (input_dim == 0) throw ContractError("architecture '" + name + "': input_dim must be positive");
    if (num_classes < 2) throw ContractError("architecture '" + name + "': need at least 2 classes");
    if (hidden.empty()) throw ContractError("architecture '" + name + "': at least one hidden layer required");
    for (const auto& h : hidden) {
        if (h.width == 0) throw ContractError("architecture '" + name + "': hidden width must be positive");
    }
}

std::string ArchitectureSpec::layers_string() const {
    std::string out;
    for (std::size_t i = 0; i < hidden.size(); ++i) {
        if (i) out += ',';
        out += std::to_string(hidden[i].width);
        if (hidden[i].batchnorm) out += "bn";
    }
    return out;
}

std::uint64_t ArchitectureSpec::hash() const {
    std::string canon =
        "in:" + std::to_string(input_dim) + "|h:" + layers_string() + "|c:" + std::to_string(num_classes) + "|relu";
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : canon) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

ArchitectureSpec ArchitectureSpec::parse(std::string_view layers, std::size_t input_dim, std::size_t num_classes,
                                         std::string name) {
    ArchitectureSpec spec;
    spec.input_dim = input_dim;
    spec.num_classes = num_classes;
    std::string text(layers);
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        auto first = item.find_first_not_of(" \t");
        auto last = item.find_last_not_of(" \t");
        if (first == std::string::npos) throw ContractError("empty hidden layer entry in '" + text + "'");
        item = item.substr(first, last - first + 1);
        HiddenLayer h;
        if (item.size() > 2 && item.ends_with("bn")) {
            h.batchnorm = true;
            item.resize(item.size() - 2);
        }
        if (item.empty() || !std::all_of(item.begin(), item.end(), [](char c) { return c >= '0' && c <= '9'; })) {
            throw ContractError("bad hidden layer entry '" + item + "' in '" + text + "'");
        }
        h.width = std::stoul(item);
        spec.hidden.push_back(h);
    }
    spec.name = name.empty() ? "mlp-" + spec.layers_string() : std::move(name);
    spec.validate();
    return spec;
}

std::vector<BatchStats> ForwardTrace::stat_values() const {
    std::vector<BatchStats> out;
    out.reserve(batch_stats.size());
    for (const auto& s : batch_stats) out.push_back({s.mean.value(), s.var.value()});
    return out;
}

Model Model::build(const ArchitectureSpec& spec, std::uint64_t seed) {
    spec.validate();
    Model m;
    m.spec_ = spec;
    Rng rng = make_rng(seed, 0x6d6f64656cULL);
    std::size_t fan_in = spec.input_dim;
    auto dense = [&](std::size_t in, std::size_t out) {
        DenseLayer layer;
        layer.weight = standard_normal({in, out}, rng, std::sqrt(2.0 / static_cast<double>(in)));
        layer.bias = Tensor::zeros({1, out});
        return layer;
    };
    for (const auto& h : spec.hidden) {
        m.layers_.push_back(dense(fan_in, h.width));
        if (h.batchnorm) {
            BatchNormState bn;
            bn.running_mean = Tensor::zeros({1, h.width});
            bn.running_var = Tensor::filled({1, h.width}, 1.0);
            bn.gamma = Tensor::filled({1, h.width}, 1.0);
            bn.beta = Tensor::zeros({1, h.width});
            m.bn_index_.push_back(static_cast<int>(m.bn_.size()));
            m.bn_.push_back(std::move(bn));
        } else {
            m.bn_index_.push_back(-1);
        }
        fan_in = h.width;
    }
    m.layers_.push_back(dense(fan_in, spec.num_classes));
    return m;
}

void Model::check_input(const Tensor& x, Mode mode) const {
    if (x.rank() != 2 || x.cols() != spec_.input_dim) {
        throw DimensionError("model '" + spec_.name + "' expects n x " + std::to_string(spec_.input_dim) +
                             " input, got " + shape_string(x.shape()));
    }
    if (mode == Mode::train && !bn_.empty() && x.rows() < 2) {
        throw ContractError("train-mode batchnorm needs a batch of at least 2 samples");
    }
}

ForwardTrace Model::trace(Tape& tape, Var x, Mode mode) const {
    check_input(tape.value(x), mode);
    ForwardTrace tr;
    // Leaves in parameter_vector order.
    std::vector<Var> w(layers_.size()), b(layers_.size());
    std::vector<Var> g(bn_.size()), be(bn_.size());
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        w[l] = tape.leaf(layers_[l].weight);
        b[l] = tape.leaf(layers_[l].bias);
        tr.params.push_back(w[l]);
        tr.params.push_back(b[l]);
        if (l < bn_index_.size() && bn_index_[l] >= 0) {
            auto k = static_cast<std::size_t>(bn_index_[l]);
            g[k] = tape.leaf(bn_[k].gamma);
            be[k] = tape.leaf(bn_[k].beta);
            tr.params.push_back(g[k]);
            tr.params.push_back(be[k]);
        }
    }

    Var h = x;
    for (std::size_t l = 0; l < spec_.hidden.size(); ++l) {
        h = add_row(matmul(h, w[l]), b[l]);
        if (bn_index_[l] >= 0) {
            auto k = static_cast<std::size_t>(bn_index_[l]);
            const BatchNormState& st = bn_[k];
            Var mu = mean(h, 0);
            Var centered = sub_row(h, mu);
            Var var = mean(square(centered), 0);
            tr.batch_stats.push_back({mu, var});
            Var normalized;
            if (mode == Mode::train) {
                normalized = div_row(centered, sqrt(add_scalar(var, st.epsilon)));
            } else {
                std::vector<double> inv(st.running_var.size());
                for (std::size_t j = 0; j < inv.size(); ++j) inv[j] = 1.0 / std::sqrt(st.running_var[j] + st.epsilon);
                Var shifted = sub_row(h, tape.constant(st.running_mean));
                normalized = mul_row(shifted, tape.constant(Tensor::unchecked(st.running_var.shape(), std::move(inv))));
            }
            h = add_row(mul_row(normalized, g[k]), be[k]);
        }
        h = relu(h);
    }
    tr.logits = add_row(matmul(h, w.back()), b.back());
    return tr;
}

void Model::update_running_stats(const std::vector<BatchStats>& stats) {
    if (stats.size() != bn_.size()) throw ContractError("batch stats do not align with batchnorm layers");
    for (std::size_t k = 0; k < bn_.size(); ++k) {
        BatchNormState& st = bn_[k];
        require_same_shape(stats[k].mean, st.running_mean, "update_running_stats");
        const double m = st.momentum;
        for (std::size_t j = 0; j < st.running_mean.size(); ++j) {
            st.running_mean[j] = (1.0 - m) * st.running_mean[j] + m * stats[k].mean[j];
            st.running_var[j] = (1.0 - m) * st.running_var[j] + m * stats[k].var[j];
        }
    }
}

ForwardResult Model::forward(const Tensor& x, Mode mode) {
    Tape tape;
    auto tr = trace(tape, tape.leaf(x), mode);
    ForwardResult out{tr.logits.value(), tr.stat_values()};
    if (mode == Mode::train) update_running_stats(out.batch_stats);
    return out;
}

ForwardResult Model::forward(const Tensor& x) const {
    Tape tape;
    auto tr = trace(tape, tape.leaf(x), Mode::eval);
    return {tr.logits.value(), tr.stat_values()};
}

Tensor Model::predict_proba(const Tensor& x) const {
    Tape tape;
    auto tr = trace(tape, tape.leaf(x), Mode::eval);
    return softmax(tr.logits).value();
}

std::vector<int> Model::predict(const Tensor& x) const {
    Tensor logits = forward(x).logits;
    std::vector<int> out(logits.rows());
    const std::size_t c = logits.cols();
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double* row = &logits.data()[i * c];
        out[i] = static_cast<int>(std::max_element(row, row + c) - row);
    }
    return out;
}

std::vector<Tensor*> Model::parameters() {
    std::vector<Tensor*> out;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        out.push_back(&layers_[l].weight);
        out.push_back(&layers_[l].bias);
        if (l < bn_index_.size() && bn_index_[l] >= 0) {
            auto k = static_cast<std::size_t>(bn_index_[l]);
            out.push_back(&bn_[k].gamma);
            out.push_back(&bn_[k].beta);
        }
    }
    return out;
}

std::vector<const Tensor*> Model::parameters() const {
    auto mut = const_cast<Model*>(this)->parameters();
    return {mut.begin(), mut.end()};
}

std::size_t Model::parameter_count() const {
    std::size_t n = 0;
    for (const Tensor* p : parameters()) n += p->size();
    return n;
}

Tensor parameter_vector(const Model& model) {
    std::vector<double> flat;
    flat.reserve(model.parameter_count());
    for (const Tensor* p : model.parameters()) flat.insert(flat.end(), p->data().begin(), p->data().end());
    const std::size_t n = flat.size();
    return Tensor({n}, std::move(flat));
}

Model load_parameter_vector(Model model, const Tensor& v) {
    const std::size_t expected = model.parameter_count();
    if (v.size() != expected) {
        throw DimensionError("parameter vector has " + std::to_string(v.size()) + " entries, model '" +
                             model.spec().name + "' needs " + std::to_string(expected));
    }
    std::size_t offset = 0;
    for (Tensor* p : model.parameters()) {
        std::copy_n(v.data().begin() + static_cast<std::ptrdiff_t>(offset), p->size(), p->data().begin());
        offset += p->size();
    }
    return model;
}

Tensor input_gradient(const Model& model, const Tensor& x, const TraceLoss& loss) {
    Tape tape;
    Var xv = tape.leaf(x);
    auto tr = model.trace(tape, xv, Mode::eval);
    Var l = loss(tape, tr);
    return tape.gradient(l, xv);
}

namespace {

constexpr std::array<char, 8> kMagic = {'C', 'D', 'R', 'M', 'P', 'V', '0', '1'};

void put_u64(std::ostream& os, std::uint64_t v) {
    std::array<unsigned char, 8> buf{};
    for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(buf.data()), 8);
}

std::uint64_t get_u64(std::istream& is) {
    std::array<unsigned char, 8> buf{};
    is.read(reinterpret_cast<char*>(buf.data()), 8);
    if (!is) throw ContractError("truncated parameter file");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
    return v;
}

}  // namespace

void save_parameters(const std::filesystem::path& path, const Model& model) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
    os.write(kMagic.data(), kMagic.size());
    put_u64(os, model.spec().hash());
    Tensor v = parameter_vector(model);
    put_u64(os, v.size());
    for (double d : v.data()) put_u64(os, std::bit_cast<std::uint64_t>(d));
}

Model load_parameters(const std::filesystem::path& path, Model model) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path.string());
    std::array<char, 8> magic{};
    is.read(magic.data(), magic.size());
    if (!is || magic != kMagic) throw ContractError(path.string() + ": not a parameter checkpoint");
    if (get_u64(is) != model.spec().hash()) {
        throw ContractError(path.string() + ": checkpoint was written for a different architecture");
    }
    std::uint64_t count = get_u64(is);
    std::vector<double> data(count);
    for (auto& d : data) d = std::bit_cast<double>(get_u64(is));
    return load_parameter_vector(std::move(model), Tensor({count}, std::move(data)));
}

}  // namespace codream
