#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "textbin/armodel.hpp"
#include "textbin/codec.hpp"
#include "textbin/config.hpp"
#include "textbin/evalkit.hpp"
#include "textbin/experiment.hpp"
#include "textbin/textrender.hpp"

namespace fs = std::filesystem;
using namespace textbin;

namespace {

enum ExitCode { kOk = 0, kUnexpected = 1, kConfig = 2, kInput = 3, kDiverged = 4, kIo = 5 };

struct Options {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::optional<long> steps;
    std::string mode;
    std::optional<std::size_t> k;
    std::optional<float> temperature;
    std::string prompt;
    std::string corpus;
    std::string tokenizer;
    std::string ar;
    std::string image;
};

/// Mirrors every line to stdout and to <out>/<command>.log.
class RunLog {
public:
    RunLog(const fs::path& path) : file_(path, std::ios::trunc) {
        if (!file_) throw IoError("cannot write log " + path.string());
    }
    void operator()(const std::string& line) {
        std::cout << line << "\n";
        file_ << line << "\n";
        file_.flush();
    }

private:
    std::ofstream file_;
};

struct Run {
    ExperimentConfig cfg;
    fs::path out;
    std::string command;
    std::unique_ptr<RunLog> log;

    fs::path corpus_dir(const Options& o) const { return o.corpus.empty() ? out / "corpus" : fs::path(o.corpus); }
    fs::path tokenizer_path(const Options& o) const { return o.tokenizer.empty() ? out / "tokenizer.tbck" : fs::path(o.tokenizer); }
    fs::path ar_path(const Options& o) const { return o.ar.empty() ? out / "ar.tbck" : fs::path(o.ar); }
};

Run start_run(const Options& o, const std::string& command) {
    Run run;
    run.command = command;
    run.cfg = load_experiment_config(o.config);
    ExperimentConfig& c = run.cfg;
    if (o.seed) c.seed = *o.seed;
    if (!o.out.empty()) c.out = o.out;
    if (o.steps) {
        if (*o.steps <= 0) throw ConfigError("--steps must be positive");
        c.tokenizer_train.steps = *o.steps;
        c.ar_train.max_steps = *o.steps;
        c.ablate_steps = *o.steps;
    }
    if (!o.mode.empty()) c.generate.mode = detail::parse_mode(o.mode);
    if (o.k) c.generate.k = *o.k;
    if (o.temperature) c.generate.temperature = *o.temperature;
    c.tokenizer_train.seed = c.seed;
    c.ar_train.seed = c.seed;
    c.generate.seed = c.seed;
    validate(c);
    run.out = c.out;
    fs::create_directories(run.out);
    write_file((run.out / (command + ".config.ini")).string(), experiment_config_text(c));
    run.log = std::make_unique<RunLog>(run.out / (command + ".log"));
    (*run.log)(command + " seed=" + std::to_string(c.seed) + " out=" + run.out.string());
    return run;
}

Tensor as_image(const Tensor& batch_of_one) {
    return reshape(batch_of_one, {batch_of_one.dim(1), batch_of_one.dim(2), batch_of_one.dim(3)});
}

// ---------------------------------------------------------------------------

int corpus_gen(const Options& o) {
    Run run = start_run(o, "corpus-gen");
    CorpusOptions opt;
    opt.width = run.cfg.width;
    opt.height = run.cfg.height;
    const fs::path dir = run.corpus_dir(o);
    const CorpusManifest m = generate_corpus(dir.string(), run.cfg.corpus_size, run.cfg.seed, opt);
    std::size_t test = 0, long_text = 0;
    for (const auto& r : m) {
        test += r.split == "test";
        long_text += is_long_text(r.spec.text);
    }
    (*run.log)("wrote " + std::to_string(m.size()) + " images to " + dir.string() + " (test " + std::to_string(test) +
               ", long text " + std::to_string(long_text) + ")");
    return kOk;
}

int train_tokenizer(const Options& o) {
    Run run = start_run(o, "train-tokenizer");
    const CorpusData corpus = load_corpus(run.corpus_dir(o).string());
    const auto images = corpus.images_of(corpus.train);
    Codec codec(run.cfg.codec, run.cfg.seed);
    TokenizerTrainer trainer(codec, images, run.cfg.tokenizer_train);
    (*run.log)("training tokenizer: " + std::to_string(images.size()) + " images, d=" +
               std::to_string(run.cfg.codec.quantizer.dims) + ", " + std::to_string(run.cfg.tokenizer_train.steps) + " steps");
    try {
        trainer.run_until(run.cfg.tokenizer_train.steps, [&](const LossRecord& r) {
            if (r.step % 100 == 0 || r.step == 1) {
                (*run.log)("step " + std::to_string(r.step) + " total " + detail::fmt6(r.total) + " l1 " +
                           detail::fmt6(r.reconstruction));
            }
        });
    } catch (const TrainingError& e) {
        save_checkpoint((run.out / "last_good.tbck").string(), trainer.save());
        (*run.log)(std::string("diverged: ") + e.what() + "; last good state saved to last_good.tbck");
        return kDiverged;
    }
    save_checkpoint(run.tokenizer_path(o).string(), trainer.save());
    std::string csv = "step,total,reconstruction,commitment,entropy,codebook\n";
    for (const auto& r : trainer.history()) {
        csv += std::to_string(r.step) + "," + detail::fmt6(r.total) + "," + detail::fmt6(r.reconstruction) + "," +
               detail::fmt6(r.commitment) + "," + detail::fmt6(r.entropy) + "," + detail::fmt6(r.codebook) + "\n";
    }
    write_file((run.out / "tokenizer_loss.csv").string(), csv);
    (*run.log)("saved " + run.tokenizer_path(o).string());
    return kOk;
}

int train_ar(const Options& o) {
    Run run = start_run(o, "train-ar");
    Codec codec = load_codec(load_checkpoint(run.tokenizer_path(o).string()));
    const CorpusData corpus = load_corpus(run.corpus_dir(o).string());
    const auto pairs = ar_pairs(corpus, codec, run.cfg.ar_pairs);
    ArModel model(run.cfg.ar, VocabLayout::for_visual(codec.config().vocab_size()), codec.config().tokens(), run.cfg.seed);
    ArTrainer trainer(model, pairs, run.cfg.ar_train);
    (*run.log)("training ar model: " + std::to_string(pairs.size()) + " pairs, attention " +
               (run.cfg.ar.causal ? "causal" : "bidirectional") + ", all image tokens masked");
    try {
        trainer.run(-1, [&](const ArRecord& r) {
            if (r.step % 100 == 0 || r.step == 1) (*run.log)("step " + std::to_string(r.step) + " loss " + detail::fmt6(r.loss));
        });
    } catch (const TrainingError& e) {
        save_checkpoint((run.out / "last_good.tbck").string(), trainer.save());
        (*run.log)(std::string("diverged: ") + e.what() + "; last good state saved to last_good.tbck");
        return kDiverged;
    }
    save_checkpoint(run.ar_path(o).string(), trainer.save());
    std::string csv = "step,loss\n";
    for (const auto& r : trainer.history()) csv += std::to_string(r.step) + "," + detail::fmt6(r.loss) + "\n";
    write_file((run.out / "ar_loss.csv").string(), csv);
    (*run.log)("stopped at step " + std::to_string(trainer.step()) + " loss " + detail::fmt6(trainer.history().back().loss) +
               (trainer.converged() ? " (target reached)" : " (step budget)"));
    return kOk;
}

int generate(const Options& o) {
    if (o.prompt.empty()) throw ConfigError("generate needs --prompt");
    Run run = start_run(o, "generate");
    Codec codec = load_codec(load_checkpoint(run.tokenizer_path(o).string()));
    ArModel model = load_ar_model(load_checkpoint(run.ar_path(o).string()));
    if (model.vocab().visual != codec.config().vocab_size()) throw ConfigError("ar model and tokenizer disagree on the codebook size");
    const auto grid = model.generate(o.prompt, run.cfg.generate);
    const fs::path path = o.image.empty() ? run.out / "generated.ppm" : fs::path(o.image);
    write_ppm(path.string(), as_image(codec.decode_tokens(grid)));
    (*run.log)("wrote " + path.string());
    return kOk;
}

int eval_recon(const Options& o) {
    Run run = start_run(o, "eval-recon");
    Codec codec = load_codec(load_checkpoint(run.tokenizer_path(o).string()));
    const CorpusData corpus = load_corpus(run.corpus_dir(o).string());
    const auto names = corpus.names_of(corpus.test);
    const auto images = corpus.images_of(corpus.test);
    const MetricReport report = evaluate_reconstruction(names, images, codec, std::size_t(run.cfg.codec.quantizer.dims));
    write_file((run.out / "recon_metrics.csv").string(), report_csv(report));
    write_file((run.out / "recon_summary.csv").string(), "metric,value\nmean_psnr," + detail::fmt6(report.mean_psnr) +
                                                            "\nmean_ssim," + detail::fmt6(report.mean_ssim) + "\nutilization," +
                                                            detail::fmt6(report.utilization) + "\n");
    (*run.log)("test images " + std::to_string(images.size()) + " psnr " + detail::fmt6(report.mean_psnr) + " ssim " +
               detail::fmt6(report.mean_ssim) + " utilization " + detail::fmt6(report.utilization));
    return kOk;
}

int eval_gen(const Options& o) {
    Run run = start_run(o, "eval-gen");
    Codec codec = load_codec(load_checkpoint(run.tokenizer_path(o).string()));
    ArModel model = load_ar_model(load_checkpoint(run.ar_path(o).string()));
    const CorpusData corpus = load_corpus(run.corpus_dir(o).string());
    CorpusManifest records;
    for (auto i : corpus.test) records.push_back(corpus.records[i]);
    const GenerationReport report = evaluate_generation(records, [&](const CorpusRecord& r) {
        return as_image(codec.decode_tokens(model.generate(r.prompt, run.cfg.generate)));
    });
    write_file((run.out / "gen_metrics.csv").string(), report_csv(report.metrics));
    write_file((run.out / "gen_summary.csv").string(), generation_summary_csv(report));
    (*run.log)("short " + std::to_string(report.short_count) + " word acc " + detail::fmt6(report.short_text.word_accuracy()) +
               ", long " + std::to_string(report.long_count) + " word acc " + detail::fmt6(report.long_text.word_accuracy()) +
               ", skipped " + std::to_string(report.skipped));
    return kOk;
}

int ablate(const Options& o) {
    Run run = start_run(o, "ablate");
    const CorpusData corpus = load_corpus(run.corpus_dir(o).string());
    const auto variants = select_variants(ablation_variants(run.cfg.codec), run.cfg.ablate_variants);
    std::vector<AblationResult> rows;
    for (const auto& v : variants) {
        (*run.log)("variant " + v.name);
        rows.push_back(run_ablation(v, corpus, run.cfg.tokenizer_train, run.cfg.ablate_steps, run.cfg.seed));
        const auto& r = rows.back();
        (*run.log)("  l1 " + detail::fmt6(r.final_reconstruction) + " psnr " + detail::fmt6(r.psnr) + " utilization " +
                   detail::fmt6(r.utilization) + " frozen unchanged " + (r.frozen_unchanged ? "yes" : "NO"));
    }
    write_file((run.out / "ablation.csv").string(), ablation_csv(rows));
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"textbin: binary text-image tokenizer, masked AR generator and evaluation"};
    app.require_subcommand(1);
    app.fallthrough();
    Options o;
    app.add_option("--config", o.config, "experiment config file")->required();
    app.add_option("--seed", o.seed, "override [run] seed");
    app.add_option("--out", o.out, "override [run] out directory");
    app.add_option("--steps", o.steps, "override the step budget of the command");
    app.add_option("--mode", o.mode, "generation mode: greedy | topk");
    app.add_option("--k", o.k, "top-k cutoff");
    app.add_option("--temperature", o.temperature, "sampling temperature");
    app.add_option("--prompt", o.prompt, "prompt for generate");
    app.add_option("--corpus", o.corpus, "corpus directory (default <out>/corpus)");
    app.add_option("--tokenizer", o.tokenizer, "tokenizer checkpoint (default <out>/tokenizer.tbck)");
    app.add_option("--ar", o.ar, "ar checkpoint (default <out>/ar.tbck)");
    app.add_option("--image", o.image, "output image for generate (default <out>/generated.ppm)");

    int code = kOk;
    auto bind = [&](const char* name, const char* help, int (*fn)(const Options&)) {
        app.add_subcommand(name, help)->callback([&, fn] { code = fn(o); });
    };
    bind("corpus-gen", "render the seeded text-image corpus", corpus_gen);
    bind("train-tokenizer", "train the binary tokenizer", train_tokenizer);
    bind("train-ar", "train the masked image-token model", train_ar);
    bind("generate", "generate an image for --prompt", generate);
    bind("eval-recon", "reconstruction metrics on the test split", eval_recon);
    bind("eval-gen", "OCR metrics of generations for the test split", eval_gen);
    bind("ablate", "train and evaluate the tokenizer ablation variants", ablate);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kConfig;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kConfig;
    } catch (const TrainingError& e) {
        std::cerr << "training error: " << e.what() << "\n";
        return kDiverged;
    } catch (const IoError& e) {
        std::cerr << "i/o error: " << e.what() << "\n";
        return kIo;
    } catch (const UnsupportedMetric& e) {
        std::cerr << "unsupported metric: " << e.what() << "\n";
        return kConfig;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kInput;
    } catch (const fs::filesystem_error& e) {
        std::cerr << "i/o error: " << e.what() << "\n";
        return kIo;
    } catch (const std::exception& e) {
        std::cerr << "unexpected error: " << e.what() << "\n";
        return kUnexpected;
    }
    return code;
}
