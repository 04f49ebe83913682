// permnet command-line laboratory: dataset generation, training, evaluation,
// ablation suites, figure-data dumps, and results reports.
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 training divergence.

#include "permnet/harness.hpp"
#include "permnet/report.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <iostream>

namespace fs = std::filesystem;
using namespace permnet;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitDiverged = 3;

int env_precision() {
    const char* p = std::getenv("PERMNET_PRECISION");
    if (!p) return 32;
    const std::string s(p);
    if (s == "32") return 32;
    if (s == "64") return 64;
    throw CLI::ValidationError("PERMNET_PRECISION must be 32 or 64, got '" + s + "'");
}

/// "10" -> [10,10]; "1..10" or "1-10" -> [1,10].
std::pair<int, int> parse_range(const std::string& s) {
    auto dots = s.find("..");
    auto dash = s.find('-', 1);
    std::string lo = s, hi = s;
    if (dots != std::string::npos) {
        lo = s.substr(0, dots);
        hi = s.substr(dots + 2);
    } else if (dash != std::string::npos) {
        lo = s.substr(0, dash);
        hi = s.substr(dash + 1);
    }
    try {
        int a = std::stoi(lo), b = std::stoi(hi);
        if (a < 1 || b < a) throw std::invalid_argument("bad order");
        return {a, b};
    } catch (const std::exception&) {
        throw CLI::ValidationError("expected N or A..B, got '" + s + "'");
    }
}

struct GenArgs {
    std::string family;
    std::string len = "10";
    std::string cases = "2..10";
    long count = 300000;
    std::uint64_t seed = 1;
    std::string out;
    long long value_min = -128, value_max = 127;
};

int cmd_gen(const GenArgs& a) {
    TaskSpec spec;
    spec.master_seed = a.seed;
    spec.example_count = static_cast<int>(a.count);
    if (a.family == "pd") spec.family = Family::DirectPerm;
    else if (a.family == "pi") spec.family = Family::IndirectPerm;
    else if (a.family == "pidict") spec.family = Family::IndirectDict;
    else if (a.family == "switch") spec.family = Family::SwitchCorpus;
    else throw CLI::ValidationError("unknown family '" + a.family + "'");
    auto [lo, hi] = parse_range(spec.family == Family::SwitchCorpus ? a.cases : a.len);
    spec.length_min = lo;
    spec.length_max = hi;
    spec.value_min = a.value_min;
    spec.value_max = a.value_max;
    spec.validate();

    auto examples = generate(spec);
    auto splits = dedup_and_split(std::move(examples), spec.split_ratios);
    std::vector<Example> all;
    all.reserve(splits.train.size() + splits.valid.size() + splits.test.size());
    for (const auto* s : {&splits.train, &splits.valid, &splits.test})
        all.insert(all.end(), s->begin(), s->end());
    Vocabulary vocab = build_vocab(all);
    write_dataset_dir(spec, splits, vocab, a.out);
    std::cout << "wrote " << splits.train.size() << "/" << splits.valid.size() << "/"
              << splits.test.size() << " examples (train/valid/test), vocab "
              << vocab.size() << " tokens -> " << a.out << "\n";
    return kExitOk;
}

struct TrainArgs {
    std::string preset_name;
    std::string config_path;
    RunConfig cfg;
    // Track which scalars were set explicitly so they override the preset.
    CLI::App* sub = nullptr;
};

void add_config_flags(CLI::App* sub, RunConfig& cfg) {
    sub->add_option("--model", cfg.model, "model registry name");
    sub->add_option("--data", cfg.data, "dataset directory (gen output)");
    sub->add_option("--out", cfg.out, "run output directory");
    sub->add_option("--emb", cfg.emb, "embedding width");
    sub->add_option("--hidden", cfg.hidden, "hidden width (transformer: feed-forward width)");
    sub->add_option("--layers", cfg.layers, "transformer layer count");
    sub->add_option("--heads", cfg.heads, "transformer head count");
    sub->add_option("--lr", cfg.lr, "learning rate");
    sub->add_option("--batch", cfg.batch, "batch size");
    sub->add_option("--epochs", cfg.epochs, "epoch count");
    sub->add_option("--seed", cfg.seed, "master seed");
    sub->add_option("--ablate", cfg.ablate, "comma-separated ablation flags");
    sub->add_option("--ckpt-policy", cfg.ckpt_policy, "checkpoint policy: last|best");
    sub->add_option("--grad-clip", cfg.grad_clip, "global gradient-norm clip (0 = off)");
    sub->add_option("--index-decay", cfg.index_decay, "index-embedding weight decay");
    sub->add_option("--train-limit", cfg.train_limit, "cap on training examples (0 = all)");
    sub->add_option("--eval-limit", cfg.eval_limit, "cap on per-epoch validation examples");
    sub->add_option("--test-limit", cfg.test_limit, "cap on test examples (0 = all)");
    sub->add_option("--teacher-forcing", cfg.teacher_forcing, "teacher-forcing ratio");
    sub->add_flag("--normalize-attention", cfg.normalize_attention,
                  "softmax-normalize permnet-d attention scores");
    sub->add_flag("--hidden-mix", cfg.hidden_mix,
                  "permnet-i: mix context into the hidden state");
}

/// Merge: preset/config file first, then any explicitly passed flag wins.
RunConfig resolve_config(const TrainArgs& a) {
    RunConfig cfg;
    bool have_base = false;
    if (!a.preset_name.empty()) {
        cfg = preset(a.preset_name);
        have_base = true;
    }
    if (!a.config_path.empty()) {
        if (have_base) throw CLI::ValidationError("--preset and --config are exclusive");
        cfg = load_config_file(a.config_path);
        have_base = true;
    }
    if (!have_base) return a.cfg;
    auto overridden = [&](const std::string& name) { return a.sub->count(name) > 0; };
    if (overridden("--model")) cfg.model = a.cfg.model;
    if (overridden("--data")) cfg.data = a.cfg.data;
    if (overridden("--out")) cfg.out = a.cfg.out;
    if (overridden("--emb")) cfg.emb = a.cfg.emb;
    if (overridden("--hidden")) cfg.hidden = a.cfg.hidden;
    if (overridden("--layers")) cfg.layers = a.cfg.layers;
    if (overridden("--heads")) cfg.heads = a.cfg.heads;
    if (overridden("--lr")) cfg.lr = a.cfg.lr;
    if (overridden("--batch")) cfg.batch = a.cfg.batch;
    if (overridden("--epochs")) cfg.epochs = a.cfg.epochs;
    if (overridden("--seed")) cfg.seed = a.cfg.seed;
    if (overridden("--ablate")) cfg.ablate = a.cfg.ablate;
    if (overridden("--ckpt-policy")) cfg.ckpt_policy = a.cfg.ckpt_policy;
    if (overridden("--grad-clip")) cfg.grad_clip = a.cfg.grad_clip;
    if (overridden("--index-decay")) cfg.index_decay = a.cfg.index_decay;
    if (overridden("--train-limit")) cfg.train_limit = a.cfg.train_limit;
    if (overridden("--eval-limit")) cfg.eval_limit = a.cfg.eval_limit;
    if (overridden("--test-limit")) cfg.test_limit = a.cfg.test_limit;
    if (overridden("--teacher-forcing")) cfg.teacher_forcing = a.cfg.teacher_forcing;
    if (overridden("--normalize-attention")) cfg.normalize_attention = a.cfg.normalize_attention;
    if (overridden("--hidden-mix")) cfg.hidden_mix = a.cfg.hidden_mix;
    return cfg;
}

template <class S>
int run_train(const RunConfig& cfg) {
    TrainResult r = train_from_dir<S>(cfg, [](const EpochRecord& e) {
        std::cout << "epoch " << e.epoch << "  loss " << e.train_loss << "  val TA "
                  << format_pct(e.val_ta) << "  val WEA " << format_pct(e.val_wea) << "  ("
                  << static_cast<long>(e.seconds) << "s)\n";
        std::cout.flush();
    });
    if (r.diverged) {
        std::cerr << "training diverged (non-finite loss); last good checkpoint kept at "
                  << r.checkpoint_path << "\n";
        return kExitDiverged;
    }
    std::cout << "test TA " << format_pct(r.test.ta) << "  test WEA " << format_pct(r.test.wea)
              << "  (" << r.test.examples << " examples, " << static_cast<long>(r.seconds)
              << "s)\n";
    return kExitOk;
}

template <class S>
int run_eval(const std::string& ckpt, const std::string& data_dir, const std::string& split,
             long limit, const std::string& out) {
    auto [model, cfg] = model_from_checkpoint<S>(ckpt);
    LoadedDataset ds = load_dataset_dir(data_dir);
    EncodedData data = encode_dataset(ds);
    const EncodedSplit* sp = &data.test;
    if (split == "train") sp = &data.train;
    else if (split == "valid") sp = &data.valid;
    else if (split != "test") throw CLI::ValidationError("split must be train|valid|test");
    DecodedSplit d = greedy_decode_split(*model, *sp, prefix_subset(*sp, limit));
    EvalResult r = aggregate_accuracy(d.preds, d.refs);
    std::cout << "TA " << format_pct(r.ta) << "  WEA " << format_pct(r.wea) << "  ("
              << r.examples << " examples)\n";
    if (!out.empty()) {
        fs::create_directories(out);
        write_predictions_tsv((fs::path(out) / ("predictions_" + split + ".tsv")).string(), d,
                              data.vocab);
        nlohmann::json j{{"split", split}, {"ta", r.ta}, {"wea", r.wea},
                         {"examples", r.examples}};
        std::ofstream os(fs::path(out) / "eval.json");
        os << j.dump(2) << "\n";
    }
    return kExitOk;
}

template <class S>
int run_ablate(const RunConfig& cfg) {
    LoadedDataset ds = load_dataset_dir(cfg.data);
    EncodedData data = encode_dataset(ds);
    auto flags = ablation_flag_list(cfg.model);
    if (flags.empty())
        throw CLI::ValidationError("model '" + cfg.model + "' has no ablation suite");
    auto rows = run_ablation_suite<S>(cfg, data, flags, [](const std::string& f) {
        std::cout << "=== variant: " << f << " ===\n";
        std::cout.flush();
    });
    fs::create_directories(cfg.out);
    const std::string dataset = fs::path(cfg.data).filename().string();
    const std::string md = ablation_table_markdown(cfg.model, dataset, rows);
    std::ofstream(fs::path(cfg.out) / "ablation.md") << md;
    std::ofstream(fs::path(cfg.out) / "ablation.csv") << ablation_table_csv(rows);
    std::cout << md;
    return kExitOk;
}

template <class S>
int run_inspect(const std::string& ckpt, const std::string& what, const std::string& data_dir,
                long example_index, const std::string& out) {
    auto [model, cfg] = model_from_checkpoint<S>(ckpt);
    fs::create_directories(out);
    if (what == "index-embedding") {
        LoadedDataset ds = load_dataset_dir(data_dir);
        Grid g = index_embedding_grid(model->params(), ds.vocab);
        const std::string path = (fs::path(out) / "index_embedding.csv").string();
        std::ofstream(path) << grid_to_csv(g);
        std::cout << "diagonal dominance: " << format_grid_value(diagonal_dominance(g))
                  << "\nwrote " << path << "\n";
        return kExitOk;
    }
    if (what == "mdp") {
        auto* pni = dynamic_cast<PermNetI<S>*>(model.get());
        if (!pni) throw std::runtime_error("mdp inspection needs a permnet-i checkpoint");
        LoadedDataset ds = load_dataset_dir(data_dir);
        const auto& split = ds.splits.test;
        if (example_index < 0 || static_cast<std::size_t>(example_index) >= split.size())
            throw std::runtime_error("example index out of range (test split has " +
                                     std::to_string(split.size()) + " examples)");
        auto src = ds.vocab.encode(split[static_cast<std::size_t>(example_index)].source);
        IndirectTrace tr = pni->trace(src);
        Grid g = mdp_grid(tr.assoc.m_dp);
        const std::string path = (fs::path(out) / ("mdp_" + std::to_string(example_index) +
                                                   ".csv")).string();
        std::ofstream(path) << grid_to_csv(g);
        std::cout << "wrote " << path << "\n";
        return kExitOk;
    }
    throw CLI::ValidationError("--what must be index-embedding or mdp");
}

int cmd_report(const std::string& runs_dir, const std::string& out) {
    auto runs = scan_runs(runs_dir);
    std::string md = report_markdown(runs);
    if (runs.empty()) std::cerr << "WARNING: no completed runs under " << runs_dir << "\n";
    // Error-locus sections for switch-corpus runs that dumped predictions.
    for (const auto& r : runs) {
        fs::path pred = fs::path(runs_dir) / r.run_name / "predictions_test.tsv";
        if (!fs::exists(pred)) continue;
        PredictionFile pf = read_predictions(pred.string());
        bool has_case = false;
        for (const auto& ref : pf.refs)
            if (std::find(ref.begin(), ref.end(), "case") != ref.end()) {
                has_case = true;
                break;
            }
        if (!has_case) continue;
        ErrorLocus el = error_locus(pf.preds, pf.refs);
        md += error_locus_markdown(r.run_name + " (" + r.model + ")", el);
    }
    if (out.empty()) {
        std::cout << md;
    } else {
        fs::path path = out;
        if (fs::exists(path) && fs::is_directory(path)) path /= "report.md";
        else if (path.extension().empty()) {
            fs::create_directories(path);
            path /= "report.md";
        } else {
            fs::create_directories(path.parent_path().empty() ? "." : path.parent_path());
        }
        std::ofstream(path) << md;
        std::cout << "wrote " << path.string() << "\n";
    }
    return kExitOk;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"permnet: indexing-by-permutation benchmark laboratory"};
    app.require_subcommand(1);
    int precision = 0;  // 0 = follow PERMNET_PRECISION (default 32)
    app.add_option("--precision", precision, "float precision: 32 or 64 (overrides env)")
        ->check(CLI::IsMember({0, 32, 64}));

    GenArgs gen;
    auto* sub_gen = app.add_subcommand("gen", "generate a dataset directory");
    sub_gen->add_option("--family", gen.family, "pd | pi | pidict | switch")->required();
    sub_gen->add_option("--len", gen.len, "data length N or range A..B");
    sub_gen->add_option("--cases", gen.cases, "switch case count N or range A..B");
    sub_gen->add_option("--count", gen.count, "example count before dedup/split");
    sub_gen->add_option("--seed", gen.seed, "master seed");
    sub_gen->add_option("--out", gen.out, "output directory")->required();
    sub_gen->add_option("--value-min", gen.value_min, "switch: smallest case value");
    sub_gen->add_option("--value-max", gen.value_max, "switch: largest case value");

    TrainArgs train;
    auto* sub_train = app.add_subcommand("train", "train a model");
    train.sub = sub_train;
    sub_train->add_option("--preset", train.preset_name, "preset name, e.g. permnet-d/pd10-desk");
    sub_train->add_option("--config", train.config_path, "key = value config file");
    add_config_flags(sub_train, train.cfg);

    std::string eval_ckpt, eval_data, eval_split = "test", eval_out;
    long eval_limit = 0;
    std::uint64_t eval_seed = 1;
    auto* sub_eval = app.add_subcommand("eval", "evaluate a checkpoint");
    sub_eval->add_option("--checkpoint", eval_ckpt, "checkpoint path")->required();
    sub_eval->add_option("--data", eval_data, "dataset directory")->required();
    sub_eval->add_option("--split", eval_split, "train | valid | test");
    sub_eval->add_option("--limit", eval_limit, "cap on evaluated examples (0 = all)");
    sub_eval->add_option("--out", eval_out, "directory for predictions + eval.json");
    sub_eval->add_option("--seed", eval_seed, "accepted for interface uniformity");

    TrainArgs ablate;
    auto* sub_ablate = app.add_subcommand("ablate", "run the ablation suite for a model");
    ablate.sub = sub_ablate;
    sub_ablate->add_option("--preset", ablate.preset_name, "preset name");
    sub_ablate->add_option("--config", ablate.config_path, "key = value config file");
    add_config_flags(sub_ablate, ablate.cfg);

    std::string ins_ckpt, ins_what, ins_data, ins_out = ".";
    long ins_example = 0;
    std::uint64_t ins_seed = 1;
    auto* sub_inspect = app.add_subcommand("inspect", "dump a figure grid from a checkpoint");
    sub_inspect->add_option("--checkpoint", ins_ckpt, "checkpoint path")->required();
    sub_inspect->add_option("--what", ins_what, "index-embedding | mdp")->required();
    sub_inspect->add_option("--data", ins_data, "dataset directory (vocab / examples)")
        ->required();
    sub_inspect->add_option("--example", ins_example, "test-split example index (mdp)");
    sub_inspect->add_option("--out", ins_out, "output directory");
    sub_inspect->add_option("--seed", ins_seed, "accepted for interface uniformity");

    std::string rep_runs, rep_out;
    std::uint64_t rep_seed = 1;
    auto* sub_report = app.add_subcommand("report", "summarize run directories as markdown");
    sub_report->add_option("--runs", rep_runs, "directory holding run directories")->required();
    sub_report->add_option("--out", rep_out, "output file or directory (default: stdout)");
    sub_report->add_option("--seed", rep_seed, "accepted for interface uniformity");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (precision == 0) precision = env_precision();
        const bool f64 = precision == 64;
        if (sub_gen->parsed()) return cmd_gen(gen);
        if (sub_train->parsed()) {
            RunConfig cfg = resolve_config(train);
            return f64 ? run_train<double>(cfg) : run_train<float>(cfg);
        }
        if (sub_eval->parsed())
            return f64 ? run_eval<double>(eval_ckpt, eval_data, eval_split, eval_limit, eval_out)
                       : run_eval<float>(eval_ckpt, eval_data, eval_split, eval_limit, eval_out);
        if (sub_ablate->parsed()) {
            RunConfig cfg = resolve_config(ablate);
            return f64 ? run_ablate<double>(cfg) : run_ablate<float>(cfg);
        }
        if (sub_inspect->parsed())
            return f64 ? run_inspect<double>(ins_ckpt, ins_what, ins_data, ins_example, ins_out)
                       : run_inspect<float>(ins_ckpt, ins_what, ins_data, ins_example, ins_out);
        if (sub_report->parsed()) return cmd_report(rep_runs, rep_out);
        std::cerr << "no subcommand\n";
        return kExitUsage;
    } catch (const CLI::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::runtime_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitData;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitData;
    }
}
