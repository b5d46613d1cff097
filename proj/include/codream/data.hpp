#pragma once

#include <cstdint>
#include <deque>
#include <filesystem>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "codream/rng.hpp"
#include "codream/tensor.hpp"

namespace codream {

inline constexpr double kIidAlpha = std::numeric_limits<double>::infinity();

struct Dataset {
    std::string name;
    Tensor features;  // n x d
    std::vector<int> labels;
    std::size_t num_classes = 0;

    std::size_t size() const { return labels.size(); }
    std::size_t dims() const { return features.cols(); }
    void validate() const;
    Dataset subset(std::span<const std::size_t> indices, std::string subset_name = {}) const;
    std::vector<std::size_t> class_counts() const;
};

// C clusters of unit-variance Gaussian noise. Means sit on a scaled simplex
// (C <= d, pairwise distance = separation) or else on a circle in the first
// two coordinates (adjacent distance = separation); centered at the origin.
// Sample i belongs to class i mod C.
Dataset gen_gaussian_mixture(std::size_t n, std::size_t num_classes, std::size_t dims, double separation,
                             std::uint64_t seed);
Tensor gaussian_mixture_means(std::size_t num_classes, std::size_t dims, double separation);

struct PartitionRepair {
    std::size_t index;
    std::size_t from_client;
    std::size_t to_client;
};

struct PartitionPlan {
    std::vector<std::vector<std::size_t>> clients;
    double alpha = kIidAlpha;
    std::vector<PartitionRepair> repairs;
};

// Per class, client proportions ~ Dir(alpha * 1_K); alpha = infinity gives
// an exact round-robin split. Empty clients take one sample from the
// currently largest client.
PartitionPlan dirichlet_partition(std::span<const int> labels, std::size_t num_clients, double alpha,
                                  std::uint64_t seed);

// Shannon entropy (nats) of a client's label histogram.
double label_entropy(std::span<const std::size_t> indices, std::span<const int> labels, std::size_t num_classes);
double mean_label_entropy(const PartitionPlan& plan, std::span<const int> labels, std::size_t num_classes);

struct DreamEntry {
    Tensor x;  // n x d
    Tensor y;  // n x C soft labels
    int round = 0;
};

struct EmptyBufferError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// FIFO of dream batches; the oldest batch is evicted at capacity.
class DreamBuffer {
   public:
    explicit DreamBuffer(std::size_t capacity = 10);

    void push(Tensor x, Tensor y, int round);
    const DreamEntry& sample(Rng& rng) const;

    std::size_t size() const { return entries_.size(); }
    std::size_t capacity() const { return capacity_; }
    bool empty() const { return entries_.empty(); }
    const std::deque<DreamEntry>& entries() const { return entries_; }

   private:
    std::size_t capacity_;
    std::deque<DreamEntry> entries_;
};

void require_simplex_rows(const Tensor& probs, double tol, const char* what);

// Header-free rows: d reals then an integer label.
Dataset load_csv(const std::filesystem::path& path, std::size_t num_classes = 0);

// Shuffled mini-batch index lists. A trailing batch of one sample is merged
// into its predecessor so batchnorm always sees at least two rows.
std::vector<std::vector<std::size_t>> minibatches(std::size_t n, std::size_t batch_size, Rng& rng);

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows);

}  // namespace codream
