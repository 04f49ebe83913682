#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "permnet/example.hpp"
#include "permnet/rng.hpp"
#include "permnet/tokens.hpp"

namespace permnet {

/// Direct lookup: out[k] = data[indices[k]], 0-based.
/// Throws std::invalid_argument when indices are out of range or not a
/// permutation of 0..len(data)-1.
std::vector<std::string> resolve_direct(const std::vector<std::string>& data,
                                        const std::vector<int>& indices);

struct DataKeyPair {
    std::string data;
    std::string key;
};

/// Key lookup: out[k] = data of the pair whose key equals queries[k].
/// Throws on duplicate keys or on a query that matches no key.
std::vector<std::string> resolve_indirect(const std::vector<DataKeyPair>& pairs,
                                          const std::vector<std::string>& queries);

/// Data alphabet used by the synthetic families: the paper's letters a..j
/// when lengths stay within 10, numbered d-tokens beyond that.
std::vector<std::string> data_alphabet(int length_max);

/// Derives the example at `index` for the spec. Pure function of
/// (spec, index); generation order never matters.
Example generate_example(const TaskSpec& spec, std::uint64_t index);

/// All example_count examples, in index order.
std::vector<Example> generate(const TaskSpec& spec);

/// Assembly-side layout of one synthetic switch statement: case values in
/// comparison-chain order plus the order the labeled blocks appear in.
/// chain value order is descending with the two smallest values swapped into
/// a je-only tail; block_order permutes chain indices.
struct SwitchLayout {
    std::vector<long long> chain_values;   // descending; the last two form the je-only tail
    std::vector<int> block_order;          // permutation of chain indices
};

/// Builds the source/target token streams for one switch example.
Example make_switch_example(const SwitchLayout& layout);

/// Random switch layout: case_count cases, unique values in [value_min, value_max].
SwitchLayout random_switch_layout(int case_count, long long value_min, long long value_max, Rng& rng);

/// Deduplicated, contiguous three-way split. Duplicates (same source and
/// target) are dropped before splitting so the splits stay disjoint.
struct DatasetSplits {
    std::vector<Example> train;
    std::vector<Example> valid;
    std::vector<Example> test;
};

DatasetSplits dedup_and_split(std::vector<Example> examples, const double ratios[3]);

/// One example per line, `source<TAB>target`.
void write_dataset(const std::vector<Example>& examples, const std::string& path);
std::vector<Example> read_dataset(const std::string& path);

/// Reserved ids fixed, remaining tokens sorted lexicographically. Idempotent.
Vocabulary build_vocab(const std::vector<Example>& examples);

/// Writes train/valid/test files, vocab.txt and manifest.jsonl under out_dir.
void write_dataset_dir(const TaskSpec& spec, const DatasetSplits& splits, const Vocabulary& vocab,
                       const std::string& out_dir);

struct LoadedDataset {
    DatasetSplits splits;
    Vocabulary vocab;
    TaskSpec spec;
};

LoadedDataset load_dataset_dir(const std::string& dir);

} // namespace permnet
