// Command-line pipeline driver: generate -> train -> calibrate -> predict ->
// evaluate, plus ablation sweeps. All experiment I/O goes through files so
// runs are reproducible and comparable byte for byte.
//
// Exit codes: 0 success, 2 config error, 3 missing input, 4 numerical or
// data failure.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>

#include "poselift/pipeline.hpp"

namespace fs = std::filesystem;
using namespace poselift;

namespace {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct MissingInput : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ExperimentConfig {
    // [data]
    synthkin::GeneratorConfig gen;
    // [model]
    long embed_dim = 64;
    long spatial_layers = 2;
    long temporal_layers = 2;
    long hidden_mult = 2;
    // [train] + [cp]
    trainer::TrainConfig train;
    // [infer]
    long h_infer = 80;
    long k_infer = 10;
    std::string mode = "cp-weighted-mean";
    // [paths]
    std::string dataset, checkpoint, calibration, predictions, report, log;

    std::uint64_t seed = 0;
    long jobs = 1;
    bool force = false;

    void apply(const std::string& key, const std::string& raw) {
        auto as_long = [&] { return std::stol(raw); };
        auto as_double = [&] { return std::stod(raw); };
        if (key == "data.count") gen.count = as_long();
        else if (key == "data.frames") gen.frames = as_long();
        else if (key == "data.joints") gen.joints = as_long();
        else if (key == "data.cal_fraction") gen.cal_fraction = as_double();
        else if (key == "data.test_fraction") gen.test_fraction = as_double();
        else if (key == "data.noise_std") gen.noise_std = as_double();
        else if (key == "data.shared_phase") gen.shared_phase = as_double();
        else if (key == "data.fx") gen.cam.fx = as_double();
        else if (key == "data.fy") gen.cam.fy = as_double();
        else if (key == "data.cx") gen.cam.cx = as_double();
        else if (key == "data.cy") gen.cam.cy = as_double();
        else if (key == "data.z_offset") gen.cam.z_offset = as_double();
        else if (key == "model.embed_dim") embed_dim = as_long();
        else if (key == "model.spatial_layers") spatial_layers = as_long();
        else if (key == "model.temporal_layers") temporal_layers = as_long();
        else if (key == "model.hidden_mult") hidden_mult = as_long();
        else if (key == "train.lambda") train.lambda = as_double();
        else if (key == "train.h_train") train.h_train = as_long();
        else if (key == "train.batch_size") train.batch_size = as_long();
        else if (key == "train.lr") train.lr = as_double();
        else if (key == "train.beta1") train.beta1 = as_double();
        else if (key == "train.beta2") train.beta2 = as_double();
        else if (key == "train.weight_decay") train.weight_decay = as_double();
        else if (key == "train.plateau_factor") train.plateau_factor = as_double();
        else if (key == "train.plateau_patience") train.plateau_patience = as_long();
        else if (key == "train.epochs") train.epochs = as_long();
        else if (key == "train.warm_start_epochs") train.warm_start_epochs = as_long();
        else if (key == "train.pose_scale_mm") train.pose_scale_mm = as_double();
        else if (key == "train.T") train.diffusion_steps = as_long();
        else if (key == "train.eta_ddim") train.eta_ddim = as_double();
        else if (key == "train.k_train") train.k_train = as_long();
        else if (key == "cp.alpha") train.cp.alpha = as_double();
        else if (key == "cp.eta_sig") train.cp.eta_sig = as_double();
        else if (key == "cp.eta_rank") train.cp.eta_rank = as_double();
        else if (key == "cp.kappa") train.cp.kappa = as_double();
        else if (key == "cp.size_eps") train.cp.size_eps = as_double();
        else if (key == "cp.split") {
            if (raw == "hypothesis") train.cp_split = trainer::CpSplit::PerSampleHypotheses;
            else if (raw == "batch") train.cp_split = trainer::CpSplit::BatchGroundTruth;
            else throw ConfigError("cp.split must be 'hypothesis' or 'batch', got: " + raw);
        }
        else if (key == "infer.h") h_infer = as_long();
        else if (key == "infer.k") k_infer = as_long();
        else if (key == "infer.mode") mode = raw;
        else if (key == "paths.dataset") dataset = raw;
        else if (key == "paths.checkpoint") checkpoint = raw;
        else if (key == "paths.calibration") calibration = raw;
        else if (key == "paths.predictions") predictions = raw;
        else if (key == "paths.report") report = raw;
        else if (key == "paths.log") log = raw;
        else if (key == "seed") seed = static_cast<std::uint64_t>(std::stoull(raw));
        else throw ConfigError("unknown config key: " + key);
    }
};

// Flat key-value text with [sections]; '#' and ';' start comments.
void load_config_file(ExperimentConfig& cfg, const std::string& path) {
    std::ifstream is(path);
    if (!is) throw MissingInput("config file not found: " + path);
    std::string line, section;
    long line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        const auto comment = line.find_first_of("#;");
        if (comment != std::string::npos) line.erase(comment);
        auto trim = [](std::string s) {
            const auto a = s.find_first_not_of(" \t\r");
            const auto b = s.find_last_not_of(" \t\r");
            return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
        };
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[' && line.back() == ']') {
            section = trim(line.substr(1, line.size() - 2));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(path + ":" + std::to_string(line_no) + ": expected key = value");
        const std::string key = trim(line.substr(0, eq));
        const std::string val = trim(line.substr(eq + 1));
        try {
            cfg.apply(section.empty() ? key : section + "." + key, val);
        } catch (const std::invalid_argument&) {
            throw ConfigError(path + ":" + std::to_string(line_no) + ": bad value for " + key);
        }
    }
}

void require_input(const std::string& path, const std::string& what) {
    if (path.empty()) throw MissingInput("no " + what + " given");
    if (!fs::exists(path)) throw MissingInput(what + " not found: " + path);
}

void require_writable(const std::string& path, bool force, const std::string& what) {
    if (path.empty()) throw ConfigError("no output path given for " + what);
    if (fs::exists(path) && !force)
        throw ConfigError(what + " already exists (pass --force to overwrite): " + path);
}

posenet::DenoiserConfig model_config(const ExperimentConfig& cfg, long frames, long joints) {
    posenet::DenoiserConfig dc;
    dc.frames = frames;
    dc.joints = joints;
    dc.embed_dim = cfg.embed_dim;
    dc.spatial_layers = cfg.spatial_layers;
    dc.temporal_layers = cfg.temporal_layers;
    dc.hidden_mult = cfg.hidden_mult;
    return dc;
}

// ---------------------------------------------------------------------------
// subcommand bodies

void cmd_generate(const ExperimentConfig& cfg, const std::string& out) {
    require_writable(out, cfg.force, "dataset");
    auto split = synthkin::make_splits(cfg.gen, cfg.seed);
    synthkin::save_dataset(out, split);
    std::cout << "wrote " << out << " (" << split.train.size() << " train, " << split.calibration.size()
              << " calibration, " << split.test.size() << " test)\n";
}

void cmd_train(ExperimentConfig cfg, const std::string& out, const std::string& resume) {
    require_input(cfg.dataset, "dataset");
    auto data = synthkin::load_dataset(cfg.dataset);
    cfg.train.seed = cfg.seed;

    trainer::Model model;
    if (!resume.empty()) {
        require_input(resume, "checkpoint to resume");
        model = trainer::load_model(resume);
    } else {
        require_writable(out, cfg.force, "checkpoint");
        model = trainer::init_model(model_config(cfg, data.frames, data.joints), cfg.train);
    }

    const std::string log_path = cfg.log.empty() ? out + ".log.jsonl" : cfg.log;
    std::ofstream log(log_path, resume.empty() ? std::ios::trunc : std::ios::app);
    if (!log) throw std::runtime_error("cannot open training log: " + log_path);
    trainer::fit(model, data, cfg.train, &log);
    trainer::save_model(out, model);
    std::cout << "wrote " << out << " after " << model.epochs_trained << " epochs (log: " << log_path << ")\n";
}

void cmd_calibrate(const ExperimentConfig& cfg, const std::string& out) {
    require_input(cfg.dataset, "dataset");
    require_input(cfg.checkpoint, "checkpoint");
    require_writable(out, cfg.force, "calibration file");
    auto data = synthkin::load_dataset(cfg.dataset);
    if (data.calibration.empty()) throw std::runtime_error("dataset has an empty calibration split");
    auto model = trainer::load_model(cfg.checkpoint);
    auto calib = pipeline::calibrate_model(model, data.calibration, cfg.train.cp.alpha);
    std::ofstream os(out, std::ios::trunc);
    os << conformal::to_json(calib).dump(2) << '\n';
    if (!os) throw std::runtime_error("cannot write calibration file: " + out);
    std::cout << "wrote " << out << " (tau=" << calib.tau << ", n_cal=" << calib.n_cal << ")\n";
}

void cmd_predict(const ExperimentConfig& cfg, const std::string& out) {
    require_input(cfg.dataset, "dataset");
    require_input(cfg.checkpoint, "checkpoint");
    require_writable(out, cfg.force, "predictions file");
    const pipeline::AggMode mode = pipeline::mode_from_name(cfg.mode);
    std::optional<conformal::CalibrationResult> calib;
    if (pipeline::mode_uses_cp(mode)) {
        require_input(cfg.calibration, "calibration file");
        std::ifstream is(cfg.calibration);
        calib = conformal::calibration_from_json(nlohmann::json::parse(is));
    }
    auto data = synthkin::load_dataset(cfg.dataset);
    auto model = trainer::load_model(cfg.checkpoint);
    auto records = pipeline::predict_run(model, data.test, mode, cfg.h_infer, cfg.k_infer,
                                         calib ? &*calib : nullptr, cfg.seed, cfg.jobs);
    pipeline::save_predictions(out, records);
    std::cout << "wrote " << out << " (" << records.size() << " samples, mode " << cfg.mode << ")\n";
}

void cmd_evaluate(const ExperimentConfig& cfg, const std::string& out) {
    require_input(cfg.dataset, "dataset");
    require_input(cfg.predictions, "predictions file");
    require_writable(out + ".json", cfg.force, "report");
    require_writable(out + ".csv", cfg.force, "report");
    std::optional<conformal::CalibrationResult> calib;
    if (!cfg.calibration.empty()) {
        require_input(cfg.calibration, "calibration file");
        std::ifstream is(cfg.calibration);
        calib = conformal::calibration_from_json(nlohmann::json::parse(is));
    }
    auto data = synthkin::load_dataset(cfg.dataset);
    auto records = pipeline::load_predictions(cfg.predictions);
    auto ev = pipeline::evaluate_predictions(records, data, calib ? &*calib : nullptr);
    {
        std::ofstream os(out + ".json", std::ios::trunc);
        os << pipeline::evaluation_to_json(ev).dump(2) << '\n';
        if (!os) throw std::runtime_error("cannot write report: " + out + ".json");
    }
    {
        std::ofstream os(out + ".csv", std::ios::trunc);
        os << metrics::csv_header() << '\n' << metrics::csv_row(ev.report) << '\n';
        if (!os) throw std::runtime_error("cannot write report: " + out + ".csv");
    }
    std::cout << "wrote " << out << ".json / .csv (mpjpe=" << ev.report.mpjpe_mm << "mm)\n";
}

void cmd_ablate(const ExperimentConfig& base, const std::string& sweep, const std::string& out_dir) {
    require_input(base.dataset, "dataset");
    if (fs::exists(out_dir) && !base.force && !fs::is_empty(out_dir))
        throw ConfigError("ablation output directory not empty (pass --force): " + out_dir);
    fs::create_directories(out_dir);
    auto data = synthkin::load_dataset(base.dataset);

    std::vector<double> grid;
    if (sweep == "h_train") grid = {4, 8, 12, 16, 20};
    else if (sweep == "h_infer") grid = {1, 5, 10, 20, 40, 80};
    else if (sweep == "lambda") grid = {0.0, 0.2, 0.4, 0.6, 0.8, 1.0};
    else throw ConfigError("unknown sweep: " + sweep + " (expected h_train, h_infer, or lambda)");

    const pipeline::AggMode mode = pipeline::mode_from_name(base.mode);
    std::ofstream csv(out_dir + "/sweep.csv", std::ios::trunc);
    csv << "sweep,value," << metrics::csv_header() << '\n';

    std::optional<trainer::Model> shared_model;  // h_infer sweep trains once
    std::optional<conformal::CalibrationResult> shared_calib;
    for (double value : grid) {
        ExperimentConfig cfg = base;
        cfg.train.seed = cfg.seed;
        long h = cfg.h_infer;
        if (sweep == "h_train") cfg.train.h_train = static_cast<long>(value);
        if (sweep == "lambda") cfg.train.lambda = value;
        if (sweep == "h_infer") h = static_cast<long>(value);

        trainer::Model* model = nullptr;
        const conformal::CalibrationResult* calib = nullptr;
        trainer::Model local_model;
        conformal::CalibrationResult local_calib;
        if (sweep == "h_infer") {
            if (!shared_model) {
                shared_model = trainer::init_model(model_config(cfg, data.frames, data.joints), cfg.train);
                trainer::fit(*shared_model, data, cfg.train, nullptr);
                shared_calib = pipeline::calibrate_model(*shared_model, data.calibration, cfg.train.cp.alpha);
            }
            model = &*shared_model;
            calib = &*shared_calib;
        } else {
            local_model = trainer::init_model(model_config(cfg, data.frames, data.joints), cfg.train);
            trainer::fit(local_model, data, cfg.train, nullptr);
            local_calib = pipeline::calibrate_model(local_model, data.calibration, cfg.train.cp.alpha);
            model = &local_model;
            calib = &local_calib;
        }
        auto records = pipeline::predict_run(*model, data.test, mode, h, cfg.k_infer,
                                             pipeline::mode_uses_cp(mode) ? calib : nullptr, cfg.seed, cfg.jobs);
        auto ev = pipeline::evaluate_predictions(records, data, calib);
        csv << sweep << ',' << value << ',' << metrics::csv_row(ev.report) << '\n';
        std::ostringstream name;
        name << out_dir << "/report_" << sweep << "_" << value << ".json";
        std::ofstream os(name.str(), std::ios::trunc);
        os << pipeline::evaluation_to_json(ev).dump(2) << '\n';
        std::cout << sweep << "=" << value << ": mpjpe=" << ev.report.mpjpe_mm
                  << "mm set=" << ev.report.mean_set_size << "\n";
    }
    if (!csv) throw std::runtime_error("cannot write sweep CSV in " + out_dir);
    std::cout << "wrote " << out_dir << "/sweep.csv\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Conformalized multi-hypothesis 3D pose lifting on synthetic kinematic data"};
    app.require_subcommand(1);
    app.fallthrough();  // --seed/--jobs/--force/--config may follow the subcommand

    std::string config_path, out, resume, sweep = "lambda";
    std::uint64_t seed = 0;
    long jobs = 1;
    bool force = false;

    app.add_option("--config", config_path, "flat key-value config file with [sections]");
    app.add_option("--seed", seed, "master seed; every random stream derives from it");
    app.add_option("--jobs", jobs, "worker threads for prediction");
    app.add_flag("--force", force, "overwrite existing outputs");

    // per-subcommand flag storage; only flags the user actually set override
    // the config file
    std::map<std::string, std::string> str_flags;
    std::map<std::string, double> num_flags;
    auto add_num = [&](CLI::App* cmd, const std::string& flag, const std::string& key, const std::string& help) {
        cmd->add_option_function<double>(
            flag, [&num_flags, key](const double& v) { num_flags[key] = v; }, help);
    };
    auto add_str = [&](CLI::App* cmd, const std::string& flag, const std::string& key, const std::string& help) {
        cmd->add_option_function<std::string>(
            flag, [&str_flags, key](const std::string& v) { str_flags[key] = v; }, help);
    };

    CLI::App* generate = app.add_subcommand("generate", "synthesize a dataset and write JSON-Lines");
    generate->add_option("--out", out, "output dataset path")->required();
    add_num(generate, "--count", "data.count", "number of sequences");
    add_num(generate, "--frames", "data.frames", "frames per sequence");
    add_num(generate, "--joints", "data.joints", "joints per skeleton");
    add_num(generate, "--cal-fraction", "data.cal_fraction", "calibration fraction");
    add_num(generate, "--test-fraction", "data.test_fraction", "test fraction");
    add_num(generate, "--noise-std", "data.noise_std", "2D observation noise std");
    add_num(generate, "--shared-phase", "data.shared_phase", "cross-sequence phase coupling in [0,1]");

    CLI::App* train = app.add_subcommand("train", "train denoiser + conformity scorer");
    train->add_option("--out", out, "output checkpoint path")->required();
    train->add_option("--resume", resume, "checkpoint to continue from");
    add_str(train, "--dataset", "paths.dataset", "dataset path");
    add_str(train, "--log", "paths.log", "training log path");
    add_num(train, "--epochs", "train.epochs", "epochs to run");
    add_num(train, "--lambda", "train.lambda", "inefficiency loss weight");
    add_num(train, "--h-train", "train.h_train", "hypotheses per sample during training");
    add_num(train, "--batch-size", "train.batch_size", "mini-batch size");
    add_num(train, "--lr", "train.lr", "learning rate");
    add_num(train, "--embed-dim", "model.embed_dim", "embedding width");
    add_num(train, "--spatial-layers", "model.spatial_layers", "joint-mixing layers");
    add_num(train, "--temporal-layers", "model.temporal_layers", "frame-mixing layers");
    add_num(train, "--alpha", "cp.alpha", "miscoverage level");
    add_num(train, "--eta-sig", "cp.eta_sig", "soft set-membership temperature");
    add_num(train, "--eta-rank", "cp.eta_rank", "soft ranking temperature");
    add_num(train, "--kappa", "cp.kappa", "singleton allowance in the inefficiency");
    add_num(train, "--warm-start-epochs", "train.warm_start_epochs", "pose-only epochs before joint training");
    add_num(train, "--pose-scale-mm", "train.pose_scale_mm", "millimeter-to-diffusion-unit divisor");
    add_str(train, "--cp-split", "cp.split", "differentiable CP split: hypothesis (per sample) or batch");

    CLI::App* calibrate = app.add_subcommand("calibrate", "compute the conformal threshold tau");
    calibrate->add_option("--out", out, "output calibration JSON")->required();
    add_str(calibrate, "--dataset", "paths.dataset", "dataset path");
    add_str(calibrate, "--checkpoint", "paths.checkpoint", "trained checkpoint");
    add_num(calibrate, "--alpha", "cp.alpha", "miscoverage level");

    CLI::App* predict = app.add_subcommand("predict", "sample, filter, and aggregate hypotheses");
    predict->add_option("--out", out, "output predictions JSON-Lines")->required();
    add_str(predict, "--dataset", "paths.dataset", "dataset path");
    add_str(predict, "--checkpoint", "paths.checkpoint", "trained checkpoint");
    add_str(predict, "--calibration", "paths.calibration", "calibration JSON (CP modes)");
    add_str(predict, "--mode", "infer.mode",
            "aggregation: naive-mean, cp-weighted-mean, cp-jagg, cp-jbest, naive-jagg");
    add_num(predict, "--hypotheses", "infer.h", "hypotheses per sample");
    add_num(predict, "--k", "infer.k", "DDIM steps per hypothesis");

    CLI::App* evaluate = app.add_subcommand("evaluate", "score predictions against ground truth");
    evaluate->add_option("--out", out, "report path prefix (writes .json and .csv)")->required();
    add_str(evaluate, "--dataset", "paths.dataset", "dataset path");
    add_str(evaluate, "--predictions", "paths.predictions", "predictions file");
    add_str(evaluate, "--calibration", "paths.calibration", "calibration JSON (enables coverage)");

    CLI::App* ablate = app.add_subcommand("ablate", "sweep h_train, h_infer, or lambda");
    ablate->add_option("--out", out, "output directory")->required();
    ablate->add_option("--sweep", sweep, "h_train, h_infer, or lambda");
    add_str(ablate, "--dataset", "paths.dataset", "dataset path");
    add_num(ablate, "--epochs", "train.epochs", "epochs per sweep point");
    add_num(ablate, "--hypotheses", "infer.h", "hypotheses at inference (fixed sweeps)");
    add_num(ablate, "--embed-dim", "model.embed_dim", "embedding width");
    add_str(ablate, "--mode", "infer.mode", "aggregation mode");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        ExperimentConfig cfg;
        if (!config_path.empty()) load_config_file(cfg, config_path);
        if (app.count("--seed")) cfg.seed = seed;
        if (app.count("--jobs")) cfg.jobs = jobs;
        cfg.force = force;
        for (const auto& [key, value] : str_flags) cfg.apply(key, value);
        for (const auto& [key, value] : num_flags) {
            std::ostringstream os;
            os.precision(17);
            os << value;
            cfg.apply(key, os.str());
        }

        if (generate->parsed()) cmd_generate(cfg, out);
        else if (train->parsed()) cmd_train(cfg, out, resume);
        else if (calibrate->parsed()) cmd_calibrate(cfg, out);
        else if (predict->parsed()) cmd_predict(cfg, out);
        else if (evaluate->parsed()) cmd_evaluate(cfg, out);
        else if (ablate->parsed()) cmd_ablate(cfg, sweep, out);
        return 0;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const MissingInput& e) {
        std::cerr << "missing input: " << e.what() << '\n';
        return 3;
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "failure: " << e.what() << '\n';
        return 4;
    }
}
