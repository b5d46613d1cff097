#include "codream/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>

namespace codream {

void Dataset::validate() const {
    if (labels.empty()) throw ContractError("dataset '" + name + "' is empty");
    if (features.rank() != 2 || features.rows() != labels.size()) {
        throw DimensionError("dataset '" + name + "': features " + shape_string(features.shape()) +
                             " do not match " + std::to_string(labels.size()) + " labels");
    }
    for (int y : labels) {
        if (y < 0 || static_cast<std::size_t>(y) >= num_classes) {
            throw ContractError("dataset '" + name + "': label " + std::to_string(y) + " outside [0, " +
                                std::to_string(num_classes) + ")");
        }
    }
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
    const std::size_t c = x.cols();
    std::vector<double> out;
    out.reserve(rows.size() * c);
    for (auto r : rows) {
        auto begin = x.data().begin() + static_cast<std::ptrdiff_t>(r * c);
        out.insert(out.end(), begin, begin + static_cast<std::ptrdiff_t>(c));
    }
    return Tensor::unchecked({rows.size(), c}, std::move(out));
}

Dataset Dataset::subset(std::span<const std::size_t> indices, std::string subset_name) const {
    if (indices.empty()) throw ContractError("empty subset of dataset '" + name + "'");
    Dataset out;
    out.name = subset_name.empty() ? name : std::move(subset_name);
    out.num_classes = num_classes;
    out.features = gather_rows(features, indices);
    out.labels.reserve(indices.size());
    for (auto i : indices) out.labels.push_back(labels.at(i));
    return out;
}

std::vector<std::size_t> Dataset::class_counts() const {
    std::vector<std::size_t> counts(num_classes, 0);
    for (int y : labels) ++counts[static_cast<std::size_t>(y)];
    return counts;
}

Tensor gaussian_mixture_means(std::size_t num_classes, std::size_t dims, double separation) {
    Tensor means = Tensor::zeros({num_classes, dims});
    if (num_classes <= dims) {
        const double s = separation / std::numbers::sqrt2;
        for (std::size_t c = 0; c < num_classes; ++c) means(c, c) = s;
    } else {
        const double radius = separation / (2.0 * std::sin(std::numbers::pi / static_cast<double>(num_classes)));
        for (std::size_t c = 0; c < num_classes; ++c) {
            double angle = 2.0 * std::numbers::pi * static_cast<double>(c) / static_cast<double>(num_classes);
            means(c, 0) = radius * std::cos(angle);
            means(c, 1) = radius * std::sin(angle);
        }
    }
    for (std::size_t j = 0; j < dims; ++j) {
        double centroid = 0.0;
        for (std::size_t c = 0; c < num_classes; ++c) centroid += means(c, j);
        centroid /= static_cast<double>(num_classes);
        for (std::size_t c = 0; c < num_classes; ++c) means(c, j) -= centroid;
    }
    return means;
}

Dataset gen_gaussian_mixture(std::size_t n, std::size_t num_classes, std::size_t dims, double separation,
                             std::uint64_t seed) {
    if (num_classes < 2) throw ContractError("gaussian mixture needs at least 2 classes");
    if (n < num_classes) throw ContractError("gaussian mixture needs n >= classes");
    if (dims < 2) throw ContractError("gaussian mixture needs at least 2 dimensions");
    if (!(separation > 0.0)) throw ContractError("gaussian mixture separation must be positive");

    Tensor means = gaussian_mixture_means(num_classes, dims, separation);
    Rng rng = make_rng(seed, 0x6d6978ULL);
    std::normal_distribution<double> noise(0.0, 1.0);
    Dataset ds;
    ds.name = "gaussian_mixture";
    ds.num_classes = num_classes;
    ds.labels.resize(n);
    std::vector<double> feats(n * dims);
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t c = i % num_classes;
        ds.labels[i] = static_cast<int>(c);
        for (std::size_t j = 0; j < dims; ++j) feats[i * dims + j] = means(c, j) + noise(rng);
    }
    ds.features = Tensor({n, dims}, std::move(feats));
    return ds;
}

PartitionPlan dirichlet_partition(std::span<const int> labels, std::size_t num_clients, double alpha,
                                  std::uint64_t seed) {
    if (num_clients < 2) throw ContractError("partition needs at least 2 clients");
    if (!(alpha > 0.0)) throw ContractError("Dirichlet alpha must be positive (or infinity for IID)");
    if (num_clients > labels.size()) {
        throw ContractError("cannot split " + std::to_string(labels.size()) + " samples across " +
                            std::to_string(num_clients) + " clients");
    }
    const bool iid = std::isinf(alpha);
    int max_label = *std::max_element(labels.begin(), labels.end());
    std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(max_label) + 1);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0) throw ContractError("negative label in partition input");
        by_class[static_cast<std::size_t>(labels[i])].push_back(i);
    }

    Rng rng = make_rng(seed, 0x646972ULL);
    PartitionPlan plan;
    plan.alpha = alpha;
    plan.clients.assign(num_clients, {});
    std::size_t rotation = 0;
    for (auto& members : by_class) {
        if (members.empty()) continue;
        std::shuffle(members.begin(), members.end(), rng);
        if (iid) {
            for (std::size_t i = 0; i < members.size(); ++i) {
                plan.clients[(rotation + i) % num_clients].push_back(members[i]);
            }
            rotation += members.size();
            continue;
        }
        std::gamma_distribution<double> gamma(alpha, 1.0);
        std::vector<double> p(num_clients);
        for (auto& v : p) v = gamma(rng);
        double total = std::accumulate(p.begin(), p.end(), 0.0);
        if (!(total > 0.0)) {
            // Every gamma draw underflowed; all mass goes to one client.
            std::fill(p.begin(), p.end(), 0.0);
            p[std::uniform_int_distribution<std::size_t>(0, num_clients - 1)(rng)] = 1.0;
            total = 1.0;
        }
        double cumulative = 0.0;
        std::size_t start = 0;
        for (std::size_t k = 0; k < num_clients; ++k) {
            cumulative += p[k] / total;
            std::size_t end = k + 1 == num_clients
                                  ? members.size()
                                  : std::min(members.size(), static_cast<std::size_t>(std::llround(
                                                                 cumulative * static_cast<double>(members.size()))));
            end = std::max(end, start);
            plan.clients[k].insert(plan.clients[k].end(), members.begin() + static_cast<std::ptrdiff_t>(start),
                                   members.begin() + static_cast<std::ptrdiff_t>(end));
            start = end;
        }
    }

    for (std::size_t k = 0; k < num_clients; ++k) {
        if (!plan.clients[k].empty()) continue;
        auto largest = std::max_element(plan.clients.begin(), plan.clients.end(),
                                        [](const auto& a, const auto& b) { return a.size() < b.size(); });
        std::size_t from = static_cast<std::size_t>(largest - plan.clients.begin());
        std::size_t moved = largest->back();
        largest->pop_back();
        plan.clients[k].push_back(moved);
        plan.repairs.push_back({moved, from, k});
    }
    for (auto& c : plan.clients) std::sort(c.begin(), c.end());
    return plan;
}

double label_entropy(std::span<const std::size_t> indices, std::span<const int> labels, std::size_t num_classes) {
    if (indices.empty()) return 0.0;
    std::vector<double> counts(num_classes, 0.0);
    for (auto i : indices) counts[static_cast<std::size_t>(labels[i])] += 1.0;
    double h = 0.0;
    for (double c : counts) {
        if (c > 0.0) {
            double p = c / static_cast<double>(indices.size());
            h -= p * std::log(p);
        }
    }
    return h;
}

double mean_label_entropy(const PartitionPlan& plan, std::span<const int> labels, std::size_t num_classes) {
    double total = 0.0;
    for (const auto& c : plan.clients) total += label_entropy(c, labels, num_classes);
    return total / static_cast<double>(plan.clients.size());
}

void require_simplex_rows(const Tensor& probs, double tol, const char* what) {
    const std::size_t c = probs.cols();
    for (std::size_t i = 0; i < probs.rows(); ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            double v = probs[i * c + j];
            if (v < -tol) throw ContractError(std::string(what) + ": negative probability in row " + std::to_string(i));
            s += v;
        }
        if (std::abs(s - 1.0) > tol) {
            throw ContractError(std::string(what) + ": row " + std::to_string(i) + " sums to " + std::to_string(s));
        }
    }
}

DreamBuffer::DreamBuffer(std::size_t capacity) : capacity_(capacity) {
    if (capacity == 0) throw ContractError("dream buffer capacity must be positive");
}

void DreamBuffer::push(Tensor x, Tensor y, int round) {
    if (x.rows() != y.rows()) throw DimensionError("dream batch and soft labels have different row counts");
    require_simplex_rows(y, 1e-9, "dream buffer");
    if (entries_.size() == capacity_) entries_.pop_front();
    entries_.push_back({std::move(x), std::move(y), round});
}

const DreamEntry& DreamBuffer::sample(Rng& rng) const {
    if (entries_.empty()) throw EmptyBufferError("sampling from an empty dream buffer");
    std::uniform_int_distribution<std::size_t> pick(0, entries_.size() - 1);
    return entries_[pick(rng)];
}

Dataset load_csv(const std::filesystem::path& path, std::size_t num_classes) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    Dataset ds;
    ds.name = path.stem().string();
    std::vector<double> feats;
    std::size_t dims = 0;
    std::string line;
    std::size_t line_no = 0;
    int max_label = -1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (cells.size() < 2) {
            throw ContractError(path.string() + ":" + std::to_string(line_no) + ": need features and a label");
        }
        if (dims == 0) dims = cells.size() - 1;
        if (cells.size() - 1 != dims) {
            throw ContractError(path.string() + ":" + std::to_string(line_no) + ": ragged row with " +
                                std::to_string(cells.size() - 1) + " features, expected " + std::to_string(dims));
        }
        try {
            for (std::size_t j = 0; j < dims; ++j) feats.push_back(std::stod(cells[j]));
            std::size_t pos = 0;
            int label = std::stoi(cells.back(), &pos);
            if (cells.back().find_first_not_of(" \t\r", pos) != std::string::npos) throw std::invalid_argument("label");
            if (label < 0) throw std::invalid_argument("label");
            ds.labels.push_back(label);
            max_label = std::max(max_label, label);
        } catch (const std::logic_error&) {
            throw ContractError(path.string() + ":" + std::to_string(line_no) + ": unparsable value");
        }
    }
    if (ds.labels.empty()) throw ContractError(path.string() + ": no rows");
    ds.num_classes = num_classes ? num_classes : static_cast<std::size_t>(max_label) + 1;
    ds.features = Tensor({ds.labels.size(), dims}, std::move(feats));
    ds.validate();
    return ds;
}

std::vector<std::vector<std::size_t>> minibatches(std::size_t n, std::size_t batch_size, Rng& rng) {
    if (batch_size == 0) throw ContractError("batch size must be positive");
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t start = 0; start < n; start += batch_size) {
        std::size_t end = std::min(n, start + batch_size);
        out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
    }
    if (out.size() > 1 && out.back().size() == 1) {
        out[out.size() - 2].push_back(out.back().front());
        out.pop_back();
    }
    return out;
}

}  // namespace codream
