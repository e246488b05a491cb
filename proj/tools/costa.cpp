// costa: contrastive span pretraining and dense retrieval at desk scale.
//
// Subcommands cover the full pipeline: build-vocab, sample-spans, pretrain,
// finetune, build-index, search, mine-negatives, eval, plus gradcheck (full
// finite-difference audit), ablate (single-axis sweeps) and make-toy
// (synthetic separable corpora). Exit codes: 0 success, 1 runtime failure,
// 2 usage error. Logs go to stderr, data to files/stdout.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "costa/checkpoint.hpp"
#include "costa/config.hpp"
#include "costa/corpus.hpp"
#include "costa/evaluation.hpp"
#include "costa/gradcheck.hpp"
#include "costa/pretrain.hpp"
#include "costa/retrieval.hpp"
#include "costa/spans.hpp"
#include "costa/synthetic.hpp"

namespace {

using namespace costa;

Stopwords load_stopwords(const std::string& path) {
    return path.empty() ? Stopwords::default_english() : Stopwords::load(path);
}

std::vector<Document> load_corpus(const std::string& path, const Vocabulary& vocab, int max_len) {
    return tokenize_corpus(read_jsonl(path), vocab, max_len);
}

std::map<std::string, int32_t> corpus_lengths(const std::vector<Document>& docs) {
    std::map<std::string, int32_t> lengths;
    for (const auto& d : docs) lengths[d.id] = d.size();
    return lengths;
}

std::map<std::string, std::vector<int32_t>> tokenize_jsonl_map(const std::string& path,
                                                               const Vocabulary& vocab) {
    std::map<std::string, std::vector<int32_t>> out;
    for (const auto& raw : read_jsonl(path)) out[raw.id] = tokenize(raw.id, raw.text, vocab).tokens;
    return out;
}

// Options shared by subcommands that instantiate a fresh encoder.
struct EncoderFlags {
    int layers, heads, hidden, ffn, max_len;

    explicit EncoderFlags(const ExperimentConfig& cfg)
        : layers(cfg.encoder.layers),
          heads(cfg.encoder.heads),
          hidden(cfg.encoder.hidden),
          ffn(cfg.encoder.ffn),
          max_len(cfg.encoder.max_len) {}

    void attach(CLI::App* cmd) {
        cmd->add_option("--layers", layers, "encoder layers");
        cmd->add_option("--heads", heads, "attention heads");
        cmd->add_option("--hidden", hidden, "hidden size");
        cmd->add_option("--ffn", ffn, "feed-forward inner size");
        cmd->add_option("--max-len", max_len, "maximum sequence length (with [CLS])");
    }

    EncoderConfig build(int vocab_size) const {
        EncoderConfig e;
        e.layers = layers;
        e.heads = heads;
        e.hidden = hidden;
        e.ffn = ffn;
        e.max_len = max_len;
        e.vocab = vocab_size;
        e.validate();
        return e;
    }
};

struct SamplerFlags {
    double alpha, beta;
    int spans_per_granularity;
    std::string granularities;
    std::string stopwords;

    explicit SamplerFlags(const ExperimentConfig& cfg)
        : alpha(cfg.sampler.alpha),
          beta(cfg.sampler.beta),
          spans_per_granularity(cfg.sampler.spans_per_granularity),
          granularities(cfg.sampler.granularities),
          stopwords(cfg.corpus.stopwords) {}

    void attach(CLI::App* cmd) {
        cmd->add_option("--alpha", alpha, "Beta distribution alpha");
        cmd->add_option("--beta", beta, "Beta distribution beta");
        cmd->add_option("--spans-per-granularity", spans_per_granularity, "spans per granularity (T)");
        cmd->add_option("--granularities", granularities, "comma list: word,phrase,sentence,paragraph");
        cmd->add_option("--stopwords", stopwords, "stopword file (default: built-in English list)");
    }

    SamplerConfig build(uint64_t seed, const Vocabulary& vocab) const {
        SamplerConfig sc;
        sc.alpha = alpha;
        sc.beta = beta;
        sc.spans_per_granularity = spans_per_granularity;
        sc.granularities = parse_granularity_list(granularities);
        sc.seed = seed;
        sc.stopword_ids = load_stopwords(stopwords).ids_in(vocab);
        return sc;
    }
};

void save_pretrain_checkpoint(const std::string& path, const Pretrainer& trainer) {
    const auto state = trainer.rng().state();
    save_checkpoint(path, trainer.params(), &trainer.adam(), &state,
                    {{"global_step", trainer.step_count()}});
}

double moving_average_tail(const std::vector<double>& values, size_t window) {
    const size_t n = std::min(window, values.size());
    double sum = 0;
    for (size_t i = values.size() - n; i < values.size(); ++i) sum += values[i];
    return n == 0 ? 0.0 : sum / static_cast<double>(n);
}

int run_cli(int argc, char** argv) {
    // The config file provides defaults; explicit flags override it.
    ExperimentConfig cfg;
    for (int i = 1; i + 1 < argc; ++i)
        if (std::string(argv[i]) == "--config") cfg = ExperimentConfig::load(argv[i + 1]);

    CLI::App app{"contrastive span pretraining and dense retrieval lab"};
    app.require_subcommand(1);
    std::string config_path;
    app.add_option("--config", config_path, "config file (TOML-style sections)");
    uint64_t seed = cfg.seed;
    int threads = cfg.threads;
    app.add_option("--seed", seed, "master seed; all randomness derives from it")->capture_default_str();
    app.add_option("--threads", threads, "worker threads (results are thread-count invariant)")
        ->capture_default_str();

    std::vector<std::function<void()>> actions;
    auto on = [&actions](CLI::App* cmd, std::function<void()> fn) {
        const size_t idx = actions.size();
        actions.push_back(std::move(fn));
        cmd->callback([&actions, idx] { actions[idx](); });
    };

    // ---- build-vocab ----
    {
        auto* cmd = app.add_subcommand("build-vocab", "build a vocabulary from a JSONL corpus");
        auto corpus = std::make_shared<std::string>();
        auto out = std::make_shared<std::string>();
        auto min_freq = std::make_shared<int>(cfg.corpus.min_freq);
        cmd->add_option("--corpus", *corpus, "corpus JSONL")->required()->check(CLI::ExistingFile);
        cmd->add_option("--out", *out, "output vocabulary TSV")->required();
        cmd->add_option("--min-freq", *min_freq, "minimum token frequency")->capture_default_str();
        on(cmd, [=] {
            std::vector<std::string> texts;
            for (const auto& d : read_jsonl(*corpus)) texts.push_back(d.text);
            auto vocab = Vocabulary::build(texts, *min_freq);
            vocab.save(*out);
            log_info("vocabulary of " + std::to_string(vocab.size()) + " tokens written to " + *out);
        });
    }

    // ---- sample-spans ----
    {
        auto* cmd = app.add_subcommand("sample-spans", "sample multi-granularity spans for a corpus");
        auto corpus = std::make_shared<std::string>();
        auto vocab_path = std::make_shared<std::string>();
        auto out = std::make_shared<std::string>();
        auto stats = std::make_shared<std::string>();
        auto max_len = std::make_shared<int>(cfg.corpus.max_len);
        auto sampler = std::make_shared<SamplerFlags>(cfg);
        cmd->add_option("--corpus", *corpus, "corpus JSONL")->required()->check(CLI::ExistingFile);
        cmd->add_option("--vocab", *vocab_path, "vocabulary TSV")->required()->check(CLI::ExistingFile);
        cmd->add_option("--out", *out, "output span TSV")->required();
        cmd->add_option("--stats", *stats, "length histogram TSV (default: <out>.stats.tsv)");
        cmd->add_option("--max-len", *max_len, "chunking length")->capture_default_str();
        sampler->attach(cmd);
        on(cmd, [=, &seed] {
            auto vocab = Vocabulary::load(*vocab_path);
            auto docs = load_corpus(*corpus, vocab, *max_len);
            auto result = prepare_spans(docs, sampler->build(seed, vocab));
            write_spans(*out, result.spans);
            write_span_stats(stats->empty() ? *out + ".stats.tsv" : *stats, result);
            log_info(std::to_string(result.spans.size()) + " spans over " +
                     std::to_string(result.docs_sampled) + " documents (" +
                     std::to_string(result.docs_skipped) + " skipped)");
        });
    }

    // ---- pretrain ----
    {
        auto* cmd = app.add_subcommand("pretrain", "contrastive span + MLM pretraining");
        auto corpus = std::make_shared<std::string>();
        auto vocab_path = std::make_shared<std::string>();
        auto spans_path = std::make_shared<std::string>();
        auto out = std::make_shared<std::string>();
        auto log_path = std::make_shared<std::string>();
        auto resume = std::make_shared<std::string>();
        auto enc = std::make_shared<EncoderFlags>(cfg);
        auto sampler = std::make_shared<SamplerFlags>(cfg);
        auto batch_size = std::make_shared<int>(cfg.pretrain.batch_size);
        auto epochs = std::make_shared<int>(cfg.pretrain.epochs);
        auto steps = std::make_shared<int64_t>(cfg.pretrain.steps);
        auto tau = std::make_shared<double>(cfg.loss.tau);
        auto lambda = std::make_shared<double>(cfg.loss.lambda);
        auto mask_prob = std::make_shared<double>(cfg.loss.mask_prob);
        auto lr = std::make_shared<double>(cfg.pretrain.lr);
        auto warmup = std::make_shared<double>(cfg.pretrain.warmup);
        auto interval = std::make_shared<int64_t>(cfg.pretrain.checkpoint_interval);
        auto projector = std::make_shared<std::string>(cfg.pretrain.projector);
        auto resample = std::make_shared<bool>(cfg.pretrain.resample_spans);
        auto clean_pass = std::make_shared<bool>(cfg.pretrain.clean_span_pass);
        auto cosine = std::make_shared<bool>(cfg.loss.cosine);
        auto exclude_own = std::make_shared<bool>(cfg.loss.exclude_own_group);
        cmd->add_option("--corpus", *corpus, "corpus JSONL")->required()->check(CLI::ExistingFile);
        cmd->add_option("--vocab", *vocab_path, "vocabulary TSV")->required()->check(CLI::ExistingFile);
        cmd->add_option("--spans", *spans_path, "span TSV from sample-spans")
            ->required()
            ->check(CLI::ExistingFile);
        cmd->add_option("--out", *out, "checkpoint path")->required();
        cmd->add_option("--log", *log_path, "loss log TSV (default: <out>.loss.tsv)");
        cmd->add_option("--resume", *resume, "checkpoint to resume from")->check(CLI::ExistingFile);
        cmd->add_option("--batch-size", *batch_size, "groups per step")->capture_default_str();
        cmd->add_option("--epochs", *epochs, "epochs over the corpus")->capture_default_str();
        cmd->add_option("--steps", *steps, "step budget; overrides --epochs when > 0")
            ->capture_default_str();
        auto stop_after = std::make_shared<int64_t>(0);
        cmd->add_option("--stop-after", *stop_after,
                        "checkpoint and exit after N steps in this invocation (simulated interruption)")
            ->capture_default_str();
        cmd->add_option("--tau", *tau, "contrastive temperature")->capture_default_str();
        cmd->add_option("--lambda", *lambda, "contrastive loss weight")->capture_default_str();
        cmd->add_option("--mask-prob", *mask_prob, "MLM corruption probability")->capture_default_str();
        cmd->add_option("--lr", *lr, "peak learning rate")->capture_default_str();
        cmd->add_option("--warmup", *warmup, "warmup fraction of total steps")->capture_default_str();
        cmd->add_option("--checkpoint-interval", *interval, "save every N steps (0: final only)")
            ->capture_default_str();
        cmd->add_option("--projector", *projector, "nonlinear|linear|none")->capture_default_str();
        cmd->add_flag("--resample-spans", *resample, "resample spans at every epoch");
        cmd->add_flag("--clean-span-pass", *clean_pass,
                      "pool spans from a second, uncorrupted forward pass");
        cmd->add_flag("--cosine", *cosine, "cosine similarity instead of dot product");
        cmd->add_flag("--exclude-own-group", *exclude_own,
                      "drop the anchor's other spans from the softmax denominator");
        enc->attach(cmd);
        sampler->attach(cmd);
        on(cmd, [=, &seed, &threads] {
            auto vocab = Vocabulary::load(*vocab_path);
            auto docs = load_corpus(*corpus, vocab, enc->max_len);
            auto spans = read_spans(*spans_path, corpus_lengths(docs));

            TrainConfig tc;
            tc.batch_size = *batch_size;
            tc.epochs = *epochs;
            tc.max_steps = *steps;
            tc.tau = *tau;
            tc.lambda = *lambda;
            tc.lr = *lr;
            tc.warmup_fraction = *warmup;
            tc.seed = seed;
            tc.projector = parse_projector(*projector);
            tc.clean_span_pass = *clean_pass;
            tc.cosine = *cosine;
            tc.exclude_own_group = *exclude_own;
            tc.mask.mask_prob = *mask_prob;
            tc.threads = threads;
            if (*resample) tc.resampler = sampler->build(seed, vocab);

            const std::string log_file = log_path->empty() ? *out + ".loss.tsv" : *log_path;
            std::unique_ptr<Pretrainer> trainer;
            bool fresh_log = true;
            if (!resume->empty()) {
                auto ck = load_checkpoint(*resume);
                if (!ck.adam || !ck.rng)
                    throw Error("BadCheckpoint", "cannot resume: optimizer/rng state missing");
                Rng rng(0);
                rng.set_state(*ck.rng);
                const int64_t start = ck.meta.value("global_step", int64_t{0});
                trainer = std::make_unique<Pretrainer>(std::move(docs), spans, tc, std::move(ck.params),
                                                       std::move(*ck.adam), rng, start);
                fresh_log = !std::filesystem::exists(log_file);
                log_info("resuming from step " + std::to_string(start));
            } else {
                trainer = std::make_unique<Pretrainer>(
                    Pretrainer::fresh(std::move(docs), spans, tc, enc->build(vocab.size())));
            }

            std::ofstream log(log_file, fresh_log ? std::ios::trunc : std::ios::app);
            if (!log) throw Error("IoError", "cannot write loss log '" + log_file + "'");
            if (fresh_log) log << loss_log_header() << '\n' << std::flush;
            int64_t taken = 0;
            while (!trainer->done() && (*stop_after == 0 || taken < *stop_after)) {
                const auto entry = trainer->step();
                ++taken;
                log << format_step_log(entry) << '\n' << std::flush;
                if (*interval > 0 && entry.step % *interval == 0)
                    save_pretrain_checkpoint(*out, *trainer);
            }
            save_pretrain_checkpoint(*out, *trainer);
            if (!trainer->done())
                log_info("stopped after " + std::to_string(taken) + " step(s) at global step " +
                         std::to_string(trainer->step_count()));
            log_info("checkpoint written to " + *out);
        });
    }

    // ---- finetune ----
    {
        auto* cmd = app.add_subcommand("finetune", "bi-encoder fine-tuning on training triples");
        auto corpus = std::make_shared<std::string>();
        auto queries_path = std::make_shared<std::string>();
        auto triples_path = std::make_shared<std::string>();
        auto vocab_path = std::make_shared<std::string>();
        auto out = std::make_shared<std::string>();
        auto init_from = std::make_shared<std::string>();
        auto log_path = std::make_shared<std::string>();
        auto enc = std::make_shared<EncoderFlags>(cfg);
        auto lr = std::make_shared<double>(cfg.finetune.lr);
        auto epochs = std::make_shared<int>(cfg.finetune.epochs);
        auto batch_size = std::make_shared<int>(cfg.finetune.batch_size);
        auto warmup = std::make_shared<double>(cfg.pretrain.warmup);
        auto q_max = std::make_shared<int>(cfg.finetune.query_max_len);
        auto d_max = std::make_shared<int>(cfg.finetune.doc_max_len);
        auto in_batch = std::make_shared<bool>(cfg.finetune.in_batch);
        auto projector = std::make_shared<std::string>(cfg.finetune.projector);
        cmd->add_option("--corpus", *corpus, "corpus JSONL")->required()->check(CLI::ExistingFile);
        cmd->add_option("--queries", *queries_path, "queries JSONL")->required()->check(CLI::ExistingFile);
        cmd->add_option("--triples", *triples_path, "training triples TSV")
            ->required()
            ->check(CLI::ExistingFile);
        cmd->add_option("--vocab", *vocab_path, "vocabulary TSV")->required()->check(CLI::ExistingFile);
        cmd->add_option("--out", *out, "output checkpoint")->required();
        cmd->add_option("--init-from", *init_from, "starting checkpoint (default: fresh init)")
            ->check(CLI::ExistingFile);
        cmd->add_option("--log", *log_path, "loss log TSV");
        cmd->add_option("--lr", *lr, "peak learning rate")->capture_default_str();
        cmd->add_option("--epochs", *epochs, "epochs over the triples")->capture_default_str();
        cmd->add_option("--batch-size", *batch_size, "triples per step")->capture_default_str();
        cmd->add_option("--warmup", *warmup, "warmup fraction")->capture_default_str();
        cmd->add_option("--query-max-len", *q_max, "query truncation length")->capture_default_str();
        cmd->add_option("--doc-max-len", *d_max, "document truncation length")->capture_default_str();
        cmd->add_flag("--in-batch,!--no-in-batch", *in_batch, "use in-batch negatives")
            ->capture_default_str();
        cmd->add_option("--projector", *projector, "nonlinear|linear|none")->capture_default_str();
        enc->attach(cmd);
        on(cmd, [=, &seed, &threads] {
            auto vocab = Vocabulary::load(*vocab_path);
            auto docs = tokenize_jsonl_map(*corpus, vocab);
            auto queries = tokenize_jsonl_map(*queries_path, vocab);
            auto triples = read_triples(*triples_path);

            ParamStore<float> params = [&] {
                if (!init_from->empty()) return load_checkpoint(*init_from).params;
                Rng rng = Rng::derive(seed, "init");
                return ParamStore<float>::random_init(enc->build(vocab.size()), rng);
            }();

            FinetuneConfig fc;
            fc.lr = *lr;
            fc.epochs = *epochs;
            fc.batch_size = *batch_size;
            fc.seed = seed;
            fc.warmup_fraction = *warmup;
            fc.query_max_len = *q_max;
            fc.doc_max_len = *d_max;
            fc.in_batch_negatives = *in_batch;
            fc.projector = parse_projector(*projector);
            fc.threads = threads;

            Finetuner tuner(std::move(docs), std::move(queries), std::move(triples), fc,
                            std::move(params));
            std::ofstream log;
            if (!log_path->empty()) {
                log.open(*log_path, std::ios::trunc);
                if (!log) throw Error("IoError", "cannot write loss log '" + *log_path + "'");
                log << "step\tlr\tloss\n";
            }
            while (!tuner.done()) {
                const auto entry = tuner.step();
                if (log.is_open()) {
                    char buf[96];
                    std::snprintf(buf, sizeof(buf), "%lld\t%.17g\t%.17g",
                                  static_cast<long long>(entry.step), entry.lr, entry.loss);
                    log << buf << '\n' << std::flush;
                }
            }
            save_checkpoint(*out, tuner.params());
            log_info("checkpoint written to " + *out);
        });
    }

    // ---- build-index ----
    {
        auto* cmd = app.add_subcommand("build-index", "encode a corpus into a dense index");
        auto corpus = std::make_shared<std::string>();
        auto vocab_path = std::make_shared<std::string>();
        auto checkpoint = std::make_shared<std::string>();
        auto out = std::make_shared<std::string>();
        auto max_len = std::make_shared<int>(cfg.finetune.doc_max_len);
        auto projector = std::make_shared<std::string>(cfg.finetune.projector);
        cmd->add_option("--corpus", *corpus, "corpus JSONL")->required()->check(CLI::ExistingFile);
        cmd->add_option("--vocab", *vocab_path, "vocabulary TSV")->required()->check(CLI::ExistingFile);
        cmd->add_option("--checkpoint", *checkpoint, "encoder checkpoint")
            ->required()
            ->check(CLI::ExistingFile);
        cmd->add_option("--out", *out, "output index file")->required();
        cmd->add_option("--max-len", *max_len, "document truncation length")->capture_default_str();
        cmd->add_option("--projector", *projector, "nonlinear|linear|none")->capture_default_str();
        on(cmd, [=, &threads] {
            auto vocab = Vocabulary::load(*vocab_path);
            auto ck = load_checkpoint(*checkpoint);
            auto docs = load_corpus(*corpus, vocab, ck.params.config.max_len);
            auto index = build_index(docs, ck.params, *max_len, parse_projector(*projector), threads);
            index.save(*out);
            log_info("index of " + std::to_string(index.size()) + " documents written to " + *out);
        });
    }

    // ---- search ----
    {
        auto* cmd = app.add_subcommand("search", "exact top-k search over a dense index");
        auto index_path = std::make_shared<std::string>();
        auto checkpoint = std::make_shared<std::string>();
        auto queries_path = std::make_shared<std::string>();
        auto vocab_path = std::make_shared<std::string>();
        auto out = std::make_shared<std::string>("-");
        auto topk = std::make_shared<int>(cfg.retrieval.topk);
        auto q_max = std::make_shared<int>(cfg.finetune.query_max_len);
        auto projector = std::make_shared<std::string>(cfg.finetune.projector);
        auto tag = std::make_shared<std::string>("costa");
        cmd->add_option("--index", *index_path, "dense index")->required()->check(CLI::ExistingFile);
        cmd->add_option("--checkpoint", *checkpoint, "encoder checkpoint")
            ->required()
            ->check(CLI::ExistingFile);
        cmd->add_option("--queries", *queries_path, "queries JSONL")->required()->check(CLI::ExistingFile);
        cmd->add_option("--vocab", *vocab_path, "vocabulary TSV")->required()->check(CLI::ExistingFile);
        cmd->add_option("--out", *out, "run file path or - for stdout")->capture_default_str();
        cmd->add_option("--topk", *topk, "results per query")->capture_default_str();
        cmd->add_option("--query-max-len", *q_max, "query truncation length")->capture_default_str();
        cmd->add_option("--projector", *projector, "nonlinear|linear|none")->capture_default_str();
        cmd->add_option("--tag", *tag, "run tag column")->capture_default_str();
        on(cmd, [=] {
            auto vocab = Vocabulary::load(*vocab_path);
            auto ck = load_checkpoint(*checkpoint);
            auto index = DenseIndex::load(*index_path);
            ensure_fingerprint(ck.params, index);
            Run run;
            for (const auto& [qid, tokens] : tokenize_jsonl_map(*queries_path, vocab)) {
                auto emb = encode_text<float>(tokens, ck.params, *q_max, parse_projector(*projector));
                for (const auto& hit : search_topk(emb, index, *topk))
                    run[qid].push_back({hit.doc_id, hit.score});
            }
            if (*out == "-")
                write_run(std::cout, run, *tag);
            else
                write_run(*out, run, *tag);
        });
    }

    // ---- mine-negatives ----
    {
        auto* cmd = app.add_subcommand("mine-negatives", "mine static hard negatives from an index");
        auto index_path = std::make_shared<std::string>();
        auto checkpoint = std::make_shared<std::string>();
        auto queries_path = std::make_shared<std::string>();
        auto vocab_path = std::make_shared<std::string>();
        auto qrels_path = std::make_shared<std::string>();
        auto triples_path = std::make_shared<std::string>();
        auto out = std::make_shared<std::string>();
        auto corpus = std::make_shared<std::string>();
        auto topk = std::make_shared<int>(cfg.retrieval.topk);
        auto iterations = std::make_shared<int>(1);
        auto negatives = std::make_shared<int>(cfg.finetune.negatives);
        auto q_max = std::make_shared<int>(cfg.finetune.query_max_len);
        auto projector = std::make_shared<std::string>(cfg.finetune.projector);
        auto lexical = std::make_shared<bool>(false);
        cmd->add_option("--index", *index_path, "dense index")->check(CLI::ExistingFile);
        cmd->add_option("--checkpoint", *checkpoint, "encoder checkpoint")->check(CLI::ExistingFile);
        cmd->add_option("--queries", *queries_path, "queries JSONL")->required()->check(CLI::ExistingFile);
        cmd->add_option("--vocab", *vocab_path, "vocabulary TSV")->required()->check(CLI::ExistingFile);
        cmd->add_option("--qrels", *qrels_path, "relevance judgments")->required()->check(CLI::ExistingFile);
        cmd->add_option("--triples", *triples_path, "existing triples (positives source)")
            ->check(CLI::ExistingFile);
        cmd->add_option("--out", *out, "output prefix; writes <out>.iterN.tsv")->required();
        cmd->add_option("--corpus", *corpus, "corpus JSONL (lexical mode)")->check(CLI::ExistingFile);
        cmd->add_flag("--lexical", *lexical,
                      "rank candidates by token overlap instead of a dense index (warm-up stand-in)");
        cmd->add_option("--topk", *topk, "candidate pool per query")->capture_default_str();
        cmd->add_option("--iterations", *iterations, "mining iterations to emit")->capture_default_str();
        cmd->add_option("--negatives", *negatives, "negatives per query")->capture_default_str();
        cmd->add_option("--query-max-len", *q_max, "query truncation length")->capture_default_str();
        cmd->add_option("--projector", *projector, "nonlinear|linear|none")->capture_default_str();
        on(cmd, [=, &seed] {
            auto vocab = Vocabulary::load(*vocab_path);
            auto qrels = Qrels::load(*qrels_path);
            auto queries = tokenize_jsonl_map(*queries_path, vocab);

            // Positives come from the input triples when given, otherwise the
            // highest-graded (then lexicographically first) relevant document.
            std::map<std::string, std::string> positives;
            if (!triples_path->empty()) {
                for (const auto& t : read_triples(*triples_path)) positives[t.qid] = t.pos;
            } else {
                for (const auto& [qid, docs] : qrels.judgments) {
                    int best = 0;
                    for (const auto& [doc, r] : docs)
                        if (r > best) {
                            best = r;
                            positives[qid] = doc;
                        }
                }
            }

            if (*lexical) {
                if (corpus->empty())
                    throw Error("MissingOption", "--lexical mining needs --corpus");
                auto docs = load_corpus(*corpus, vocab, 1 << 20);
                auto triples = lexical_overlap_negatives(queries, positives, docs, qrels, *negatives);
                write_triples(*out, triples);
                log_info(std::to_string(triples.size()) + " lexical warm-up triples -> " + *out);
                return;
            }
            if (index_path->empty() || checkpoint->empty())
                throw Error("MissingOption", "dense mining needs --index and --checkpoint");
            auto ck = load_checkpoint(*checkpoint);
            auto index = DenseIndex::load(*index_path);

            for (int iter = 1; iter <= *iterations; ++iter) {
                MineOptions opt;
                opt.topk = *topk;
                opt.negatives = *negatives;
                opt.seed = seed;
                opt.iteration = static_cast<uint64_t>(iter);
                opt.query_max_len = *q_max;
                opt.projector = parse_projector(*projector);
                auto result = mine_hard_negatives(queries, positives, index, ck.params, qrels, opt);
                const std::string path = *out + ".iter" + std::to_string(iter) + ".tsv";
                write_triples(path, result.triples);
                log_info("iteration " + std::to_string(iter) + ": " +
                         std::to_string(result.triples.size()) + " triples (" +
                         std::to_string(result.fallback_queries) + " random-fallback, " +
                         std::to_string(result.padded_queries) + " padded) -> " + path);
            }
        });
    }

    // ---- eval ----
    {
        auto* cmd = app.add_subcommand("eval", "TREC-style evaluation of a run file");
        auto run_path = std::make_shared<std::string>();
        auto qrels_path = std::make_shared<std::string>();
        auto metrics = std::make_shared<std::string>("mrr@10,ndcg@10,recall@100,recall@1000");
        cmd->add_option("--run", *run_path, "run file")->required()->check(CLI::ExistingFile);
        cmd->add_option("--qrels", *qrels_path, "relevance judgments")->required()->check(CLI::ExistingFile);
        cmd->add_option("--metrics", *metrics, "comma list of metric@k")->capture_default_str();
        on(cmd, [=] {
            auto run = load_run(*run_path);
            auto qrels = Qrels::load(*qrels_path);
            std::stringstream list(*metrics);
            std::string item;
            bool warned = false;
            while (std::getline(list, item, ',')) {
                const auto at = item.find('@');
                if (at == std::string::npos)
                    throw Error("BadMetric", "'" + item + "' is not of the form metric@k");
                const std::string name = item.substr(0, at);
                const int k = detail::config_number<int>(item.substr(at + 1), "metric '" + item + "'");
                std::vector<std::string> skipped;
                double value = 0;
                if (name == "mrr")
                    value = mrr_at_k(run, qrels, k, &skipped);
                else if (name == "ndcg")
                    value = ndcg_at_k(run, qrels, k, &skipped);
                else if (name == "recall")
                    value = recall_at_k(run, qrels, k, &skipped);
                else
                    throw Error("BadMetric", "unknown metric '" + name + "'");
                if (!warned && !skipped.empty()) {
                    log_warn(std::to_string(skipped.size()) +
                             " run query(ies) lack relevant judgments and were excluded");
                    warned = true;
                }
                char buf[64];
                std::snprintf(buf, sizeof(buf), "%.6f", value);
                std::cout << item << '\t' << buf << '\n';
            }
        });
    }

    // ---- gradcheck ----
    {
        auto* cmd = app.add_subcommand("gradcheck", "finite-difference audit of the training gradients");
        auto configs = std::make_shared<int>(20);
        auto lambda = std::make_shared<double>(cfg.loss.lambda);
        auto tau = std::make_shared<double>(cfg.loss.tau);
        auto threshold = std::make_shared<double>(1e-4);
        cmd->add_option("--configs", *configs, "random configurations to audit")->capture_default_str();
        cmd->add_option("--lambda", *lambda, "contrastive loss weight")->capture_default_str();
        cmd->add_option("--tau", *tau, "contrastive temperature")->capture_default_str();
        cmd->add_option("--threshold", *threshold, "maximum allowed relative error")
            ->capture_default_str();
        on(cmd, [=, &seed] {
            GradCheckOptions opt;
            opt.seed = seed;
            opt.configs = *configs;
            opt.lambda = *lambda;
            opt.tau = *tau;
            auto report = run_gradcheck(opt);
            std::cout << "config\tlayers\thidden\theads\tbatch\tparams\tmax_rel_error\tworst_tensor\n";
            for (size_t i = 0; i < report.cases.size(); ++i) {
                const auto& c = report.cases[i];
                char buf[64];
                std::snprintf(buf, sizeof(buf), "%.3e", c.max_rel_error);
                std::cout << i << '\t' << c.config.layers << '\t' << c.config.hidden << '\t'
                          << c.config.heads << '\t' << c.batch << '\t' << c.params_checked << '\t'
                          << buf << '\t' << c.worst_tensor << '\n';
            }
            char buf[64];
            std::snprintf(buf, sizeof(buf), "%.3e", report.max_rel_error);
            std::cout << "max_rel_error\t" << buf << '\n';
            if (!report.pass(*threshold))
                throw Error("GradCheckFailed", "max relative error " + std::string(buf) +
                                                   " exceeds threshold");
            log_info("gradcheck passed");
        });
    }

    // ---- ablate ----
    {
        auto* cmd = app.add_subcommand("ablate", "single-axis sweep on a toy corpus");
        auto axis = std::make_shared<std::string>();
        auto corpus = std::make_shared<std::string>();
        auto vocab_path = std::make_shared<std::string>();
        auto out = std::make_shared<std::string>();
        auto steps = std::make_shared<int64_t>(200);
        auto batch_size = std::make_shared<int>(cfg.pretrain.batch_size);
        auto lr = std::make_shared<double>(cfg.pretrain.lr);
        auto enc = std::make_shared<EncoderFlags>(cfg);
        auto sampler = std::make_shared<SamplerFlags>(cfg);
        cmd->add_option("--axis", *axis, "granularity|span-count|projector|temperature")
            ->required()
            ->check(CLI::IsMember({"granularity", "span-count", "projector", "temperature"}));
        cmd->add_option("--corpus", *corpus, "corpus JSONL")->required()->check(CLI::ExistingFile);
        cmd->add_option("--vocab", *vocab_path, "vocabulary TSV")->required()->check(CLI::ExistingFile);
        cmd->add_option("--out", *out, "results TSV")->required();
        cmd->add_option("--steps", *steps, "training steps per setting")->capture_default_str();
        cmd->add_option("--batch-size", *batch_size, "groups per step")->capture_default_str();
        cmd->add_option("--lr", *lr, "peak learning rate")->capture_default_str();
        enc->attach(cmd);
        sampler->attach(cmd);
        on(cmd, [=, &seed, &threads] {
            auto vocab = Vocabulary::load(*vocab_path);
            auto docs = load_corpus(*corpus, vocab, enc->max_len);

            struct Setting {
                std::string label;
                double tau = 0.1;
                Projector projector = Projector::Nonlinear;
                int spans_per_granularity;
                std::string granularities;
            };
            Setting base;
            base.spans_per_granularity = sampler->spans_per_granularity;
            base.granularities = sampler->granularities;
            std::vector<Setting> settings;
            if (*axis == "temperature") {
                for (double tau : {10.0, 1.0, 0.1, 0.01}) {
                    Setting s = base;
                    char label[32];
                    std::snprintf(label, sizeof(label), "tau=%g", tau);
                    s.label = label;
                    s.tau = tau;
                    settings.push_back(s);
                }
            } else if (*axis == "span-count") {
                for (int t : {3, 5, 10, 20}) {
                    Setting s = base;
                    s.label = "T=" + std::to_string(t);
                    s.spans_per_granularity = t;
                    settings.push_back(s);
                }
            } else if (*axis == "projector") {
                for (const char* p : {"nonlinear", "linear", "none"}) {
                    Setting s = base;
                    s.label = p;
                    s.projector = parse_projector(p);
                    settings.push_back(s);
                }
            } else {  // granularity
                settings.push_back(base);
                settings.back().label = "all";
                for (const char* drop : {"word", "phrase", "sentence", "paragraph"}) {
                    Setting s = base;
                    s.label = std::string("wo-") + drop;
                    std::string list;
                    for (const char* g : {"word", "phrase", "sentence", "paragraph"})
                        if (std::string(g) != drop) list += (list.empty() ? "" : ",") + std::string(g);
                    s.granularities = list;
                    settings.push_back(s);
                }
            }

            std::ofstream results(*out, std::ios::trunc);
            if (!results) throw Error("IoError", "cannot write results file '" + *out + "'");
            results << "axis\tsetting\tsteps\tgwc_ma10\tmlm_ma10\ttotal_ma10\tgroup_nn_accuracy\n";
            for (const auto& s : settings) {
                SamplerFlags sf = *sampler;
                sf.spans_per_granularity = s.spans_per_granularity;
                sf.granularities = s.granularities;
                auto prepared = prepare_spans(docs, sf.build(seed, vocab));

                TrainConfig tc;
                tc.batch_size = *batch_size;
                tc.epochs = 1;
                tc.max_steps = *steps;
                tc.tau = s.tau;
                tc.lr = *lr;
                tc.seed = seed;
                tc.projector = s.projector;
                tc.threads = threads;
                auto trainer = Pretrainer::fresh(docs, prepared.spans, tc, enc->build(vocab.size()));
                std::vector<double> gwc, mlm, total;
                while (!trainer.done()) {
                    auto entry = trainer.step();
                    gwc.push_back(entry.gwc);
                    mlm.push_back(entry.mlm);
                    total.push_back(entry.total);
                }
                const double acc = group_nn_accuracy(trainer.params(), trainer.docs(),
                                                     trainer.current_spans(), s.projector, threads);
                char buf[256];
                std::snprintf(buf, sizeof(buf), "%s\t%s\t%lld\t%.6g\t%.6g\t%.6g\t%.6g", axis->c_str(),
                              s.label.c_str(), static_cast<long long>(*steps),
                              moving_average_tail(gwc, 10), moving_average_tail(mlm, 10),
                              moving_average_tail(total, 10), acc);
                results << buf << '\n' << std::flush;
                log_info("ablate " + s.label + " done");
            }
            log_info("results written to " + *out);
        });
    }

    // ---- make-toy ----
    {
        auto* cmd = app.add_subcommand("make-toy", "generate a synthetic separable corpus");
        auto out_dir = std::make_shared<std::string>();
        auto topics = std::make_shared<int>(10);
        auto docs_per_topic = std::make_shared<int>(10);
        auto words_per_topic = std::make_shared<int>(30);
        auto doc_len_min = std::make_shared<int>(60);
        auto doc_len_max = std::make_shared<int>(100);
        auto train_queries = std::make_shared<int>(20);
        auto test_queries = std::make_shared<int>(20);
        auto negatives = std::make_shared<int>(cfg.finetune.negatives);
        cmd->add_option("--out-dir", *out_dir, "output directory")->required();
        cmd->add_option("--topics", *topics, "number of disjoint topics")->capture_default_str();
        cmd->add_option("--docs-per-topic", *docs_per_topic, "documents per topic")
            ->capture_default_str();
        cmd->add_option("--words-per-topic", *words_per_topic, "vocabulary per topic")
            ->capture_default_str();
        cmd->add_option("--doc-len-min", *doc_len_min, "minimum document length")->capture_default_str();
        cmd->add_option("--doc-len-max", *doc_len_max, "maximum document length")->capture_default_str();
        cmd->add_option("--train-queries", *train_queries, "training queries")->capture_default_str();
        cmd->add_option("--test-queries", *test_queries, "held-out queries")->capture_default_str();
        cmd->add_option("--negatives", *negatives, "negatives per training triple")
            ->capture_default_str();
        on(cmd, [=, &seed] {
            ToyConfig tc;
            tc.topics = *topics;
            tc.docs_per_topic = *docs_per_topic;
            tc.words_per_topic = *words_per_topic;
            tc.doc_len_min = *doc_len_min;
            tc.doc_len_max = *doc_len_max;
            tc.train_queries = *train_queries;
            tc.test_queries = *test_queries;
            tc.negatives = *negatives;
            tc.seed = seed;
            auto toy = make_toy(tc);
            std::filesystem::create_directories(*out_dir);
            const auto dir = std::filesystem::path(*out_dir);
            write_jsonl((dir / "corpus.jsonl").string(), toy.docs);
            write_jsonl((dir / "train-queries.jsonl").string(), toy.train_queries);
            write_jsonl((dir / "test-queries.jsonl").string(), toy.test_queries);
            toy.train_qrels.save((dir / "train-qrels.txt").string());
            toy.test_qrels.save((dir / "test-qrels.txt").string());
            write_triples((dir / "train-triples.tsv").string(), toy.triples);
            log_info("toy corpus written to " + *out_dir);
        });
    }

    // Global options (--seed, --threads, --config) may follow the subcommand.
    for (auto* sub : app.get_subcommands([](CLI::App*) { return true; })) sub->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n";
        std::cerr << "run with --help for usage\n";
        return 2;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run_cli(argc, argv);
    } catch (const costa::Error& e) {
        std::cerr << nlohmann::json{{"error", e.code()}, {"message", e.what()}}.dump() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << nlohmann::json{{"error", "Unhandled"}, {"message", e.what()}}.dump() << "\n";
        return 1;
    }
}
