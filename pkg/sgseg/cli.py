import argparse
import csv
import logging
import os
import sqlite3
import sys
from dataclasses import dataclass

import numpy as np
import torch

from sgseg.__about__ import __cli__ as prog_name, __version__ as version
from sgseg.checkpoint import checkpoint_roundtrip
from sgseg.config import (
    DetectorConfig,
    GeneratorConfig,
    SegNetConfig,
    TrainConfig,
    read_config_file,
    unknown_keys,
)
from sgseg.data_forge import (
    generate_dataset,
    ingest_manifest,
    load_sample,
    read_image,
    read_mask,
    split_dataset,
    write_manifest,
    write_png,
)
from sgseg.evalkit import (
    MODES,
    ablation_summary,
    evaluate_ablation,
    export_attention_maps,
    seg_metrics,
)
from sgseg.exceptions import (
    DataValidationException,
    NumericException,
    SGSegException,
    UsageException,
)
from sgseg.locparse import pseudo_label_corpus, write_label_file
from sgseg.run_ledger import (
    format_runs,
    list_runs,
    list_runs_current_month,
    list_runs_last_month,
    save_run_end,
    save_run_start,
)
from sgseg.seg_net import importance_by_group
from sgseg.trainer import train_detector, train_segmenter
from sgseg.utils import config_hash, provenance_line, seed_everything

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class ArgumentParser(argparse.ArgumentParser):
    """argparse that raises instead of exiting on usage errors."""

    def error(self, message):
        raise UsageException("{}: error: {}".format(self.prog, message))


def _load_config(args):
    mapping = read_config_file(args.config) if args.config else {}
    unknown = unknown_keys(mapping)
    if unknown:
        raise UsageException(
            "Claves desconocidas en {}: {}".format(args.config, ", ".join(unknown))
        )
    if args.seed is not None:
        mapping["seed"] = str(args.seed)
    mapping.setdefault("seed", "0")
    try:
        int(mapping["seed"])
    except ValueError:
        raise UsageException("Semilla inválida: {!r}".format(mapping["seed"]))
    return mapping


def _provenance(args):
    return provenance_line(args.config_mapping, args.config_mapping["seed"])


def _seed(args):
    return int(args.config_mapping["seed"])


def _ensure_dir(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as ex:
        raise DataValidationException(
            "No se puede escribir en {}: {}".format(path, ex.strerror)
        )


def _manifest(path, split="train"):
    manifest = ingest_manifest(path, split=split)
    for error in manifest.errors:
        print("Registro descartado: {}".format(error), file=sys.stderr)
    return manifest


def _write_history(path, result, provenance):
    with open(path, "w", encoding="utf-8", newline="") as fp:
        fp.write("# {}\n".format(provenance))
        writer = csv.writer(fp, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", result.metric_name, "lr"])
        for record in result.history:
            writer.writerow([
                record.epoch,
                "{:.6f}".format(record.train_loss),
                "{:.6f}".format(record.val_metric),
                "{:.3e}".format(record.lr),
            ])


def gen_data(args):
    config = GeneratorConfig.from_mapping(args.config_mapping, num_samples=args.num_samples)
    manifest = generate_dataset(config, args.out, provenance=_provenance(args))

    train, val, test = split_dataset(manifest, config.split_ratios, seed=config.seed)
    for subset in (train, val, test):
        write_manifest(
            os.path.join(args.out, "{}.csv".format(subset.split)), subset.records, _provenance(args)
        )

    print("Muestras generadas: {} ({} / {} / {})".format(
        len(manifest), len(train), len(val), len(test)
    ))
    print("Manifiesto: {}".format(os.path.join(args.out, "manifest.csv")))


def pseudo_label(args):
    manifest = _manifest(args.manifest)
    labels, audit = pseudo_label_corpus(
        [r.report for r in manifest.records], min_cluster_size=args.min_cluster_size
    )

    _ensure_dir(args.out)
    label_path = os.path.join(args.out, "labels.csv")
    write_label_file(label_path, manifest.image_paths, labels, provenance=_provenance(args))
    with open(os.path.join(args.out, "audit.txt"), "w", encoding="utf-8") as fp:
        fp.write("provenance = {}\n".format(_provenance(args)))
        fp.write(audit.to_text())

    print("Etiquetas: {} ({})".format(label_path, len(labels)))
    print("Auditoría: {}".format(audit.status))


def train_seg(args):
    config = TrainConfig.from_mapping(args.config_mapping, report_source=args.report_source)
    seg_config = SegNetConfig.from_mapping(args.config_mapping)

    _ensure_dir(args.out)
    ckpt_path = os.path.join(args.out, "segmenter.ckpt")
    result = train_segmenter(
        _manifest(args.train, "train"),
        _manifest(args.val, "val") if args.val else None,
        config,
        seg_config,
        out_path=ckpt_path,
        provenance=_provenance(args),
        verbose=not args.quiet,
    )
    _write_history(os.path.join(args.out, "history_segmenter.csv"), result, _provenance(args))

    print("Mejor época: {} (val_dice = {:.4f})".format(result.best_epoch, result.best_metric))
    print("Checkpoint: {}".format(ckpt_path))


def train_det(args):
    config = TrainConfig.from_mapping(args.config_mapping)
    det_config = DetectorConfig.from_mapping(args.config_mapping, architecture=args.architecture)

    _ensure_dir(args.out)
    ckpt_path = os.path.join(args.out, "{}.ckpt".format(
        "detector" if det_config.architecture == "lerg" else "detector_simple"
    ))
    result = train_detector(
        _manifest(args.train, "train"),
        args.labels,
        _manifest(args.val, "val") if args.val else None,
        config,
        det_config,
        out_path=ckpt_path,
        provenance=_provenance(args),
        verbose=not args.quiet,
    )
    _write_history(os.path.join(args.out, "history_{}.csv".format(
        os.path.splitext(os.path.basename(ckpt_path))[0]
    )), result, _provenance(args))

    print("Mejor época: {} (val_macro_f1 = {:.4f})".format(result.best_epoch, result.best_metric))
    print("Checkpoint: {}".format(ckpt_path))


@dataclass
class InferenceResult:
    mask: np.ndarray
    report: str
    metrics: tuple = None


def self_guided_segment(image_path, seg_ckpt, det_ckpt=None, tau=0.5, out_dir=None, report=None,
                        mask_path=None, provenance=""):
    """
    Segment one image. Without ``report`` the report is generated by the
    detector (text-free inference); with it, the given text guides the
    segmenter. Writes ``mask.png``, ``report.txt`` and, when a ground-truth
    mask is given, ``metrics.txt`` into ``out_dir``.
    """
    image = read_image(image_path)
    side = image.shape[0]

    if report is None:
        if not det_ckpt:
            raise UsageException("La inferencia sin texto necesita --det-ckpt")
        detector = checkpoint_roundtrip(det_ckpt, image_size=side, kind="detector")
        report = detector.generate_report(image, tau)

    segmenter = checkpoint_roundtrip(seg_ckpt, image_size=side, kind="segmenter")
    with torch.no_grad():
        mask = segmenter.segment(image, report).binarize(0.5)[0].numpy()

    metrics = None
    if mask_path:
        metrics = seg_metrics(mask, read_mask(mask_path))

    if out_dir:
        _ensure_dir(out_dir)
        write_png(os.path.join(out_dir, "mask.png"), mask * 255, provenance)
        with open(os.path.join(out_dir, "report.txt"), "w", encoding="utf-8") as fp:
            fp.write("# {}\n{}\n".format(provenance, report))
        if metrics is not None:
            with open(os.path.join(out_dir, "metrics.txt"), "w", encoding="utf-8") as fp:
                fp.write("provenance = {}\n".format(provenance))
                for key, value in metrics._asdict().items():
                    fp.write("{} = {:.6f}\n".format(key, value))

    return InferenceResult(mask=mask, report=report, metrics=metrics)


def infer(args):
    mode = args.mode or ("full-text" if args.report is not None else "self-guided")
    if mode == "full-text" and args.report is None:
        raise UsageException("--mode full-text requiere --report")
    if mode != "full-text" and args.report is not None:
        raise UsageException("--report solo se admite con --mode full-text")
    if mode == "self-guided" and not args.det_ckpt:
        raise UsageException("--mode self-guided requiere --det-ckpt")

    seed_everything(_seed(args), deterministic=True)
    report = {"full-text": args.report, "text-free": ""}.get(mode)
    result = self_guided_segment(
        args.image, args.seg_ckpt, args.det_ckpt, args.tau, args.out,
        report=report, mask_path=args.mask, provenance=_provenance(args),
    )

    print("Reporte: {}".format(result.report or "(vacío)"))
    if result.metrics is not None:
        print("Exactitud: {:.4f}  Dice: {:.4f}  Jaccard: {:.4f}".format(*result.metrics))
    print("Máscara: {}".format(os.path.join(args.out, "mask.png")))


def _parse_modes(text):
    modes = tuple(m.strip() for m in text.split(",") if m.strip())
    unknown = [m for m in modes if m not in MODES]
    if unknown or not modes:
        raise UsageException("Modos desconocidos: {}".format(", ".join(unknown) or text))
    return modes


def evaluate(args):
    if args.mode in ("self-guided", "self-guided-simple") and not args.det_ckpt:
        raise UsageException("--mode {} requiere --det-ckpt".format(args.mode))

    seed_everything(_seed(args), deterministic=True)
    manifest = _manifest(args.manifest, "test")
    reports = evaluate_ablation(
        args.seg_ckpt, manifest, modes=(args.mode,),
        det_ckpt=args.det_ckpt if args.mode == "self-guided" else None,
        simple_det_ckpt=args.det_ckpt if args.mode == "self-guided-simple" else None,
        tau=args.tau, seed=_seed(args), provenance=_provenance(args),
    )
    report = reports[args.mode]

    _ensure_dir(args.out)
    report.write(args.out)
    print("{}: exactitud {:.4f}  Dice {:.4f}  Jaccard {:.4f}".format(
        args.mode, report.accuracy, report.dice, report.jaccard
    ))


def ablate(args):
    modes = _parse_modes(args.modes)
    if "self-guided" in modes and not args.det_ckpt:
        raise UsageException("El modo self-guided requiere --det-ckpt")
    if "self-guided-simple" in modes and not args.simple_det_ckpt:
        raise UsageException("El modo self-guided-simple requiere --simple-det-ckpt")

    seed_everything(_seed(args), deterministic=True)
    reports = evaluate_ablation(
        args.seg_ckpt, _manifest(args.manifest, "test"), modes=modes,
        det_ckpt=args.det_ckpt, text_free_ckpt=args.text_free_ckpt,
        simple_det_ckpt=args.simple_det_ckpt, tau=args.tau, seed=_seed(args),
        provenance=_provenance(args),
    )

    _ensure_dir(args.out)
    for report in reports.values():
        report.write(args.out)
    with open(os.path.join(args.out, "ablation.csv"), "w", encoding="utf-8", newline="") as fp:
        fp.write("# {}\n".format(_provenance(args)))
        fp.write(ablation_summary(reports))

    for mode, report in reports.items():
        print("{:<20} Dice {:.4f}  Jaccard {:.4f}  Exactitud {:.4f}".format(
            mode, report.dice, report.jaccard, report.accuracy
        ))


def attn_viz(args):
    manifest = _manifest(args.manifest, "test")
    if not 0 <= args.index < len(manifest):
        raise UsageException("--index fuera de rango (0..{})".format(len(manifest) - 1))
    sample = load_sample(manifest, manifest.records[args.index])

    report = sample.report
    if args.det_ckpt:
        detector = checkpoint_roundtrip(args.det_ckpt, image_size=sample.image.shape[0], kind="detector")
        report = detector.generate_report(sample.image, args.tau)

    segmenter = checkpoint_roundtrip(args.seg_ckpt, image_size=sample.image.shape[0], kind="segmenter")
    export = export_attention_maps(
        sample.image, segmenter, report, args.out, mask=sample.mask, provenance=_provenance(args)
    )

    location, filler = importance_by_group(export.scores)
    print("Reporte: {}".format(report))
    print("Importancia media: ubicación {:.4f}, relleno {:.4f}".format(location, filler))
    for name, path in export.paths.items():
        print("{}: {}".format(name, path))


def _common_parser():
    common = ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="Archivo de configuración 'clave = valor'")
    common.add_argument("-s", "--seed", type=int, default=None, help="Semilla global (por defecto 0)")
    common.add_argument(
        "-nl",
        "--no-log",
        action="store_true",
        default=False,
        help="No salvar en la BD el registro de esta ejecución",
    )
    return common


def _tau(text):
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError("no es un número: {!r}".format(text))
    if not 0.0 < value < 1.0:
        raise argparse.ArgumentTypeError("debe estar en (0, 1): {}".format(value))
    return value


def build_parser():
    parser = ArgumentParser(prog=prog_name)
    parser.add_argument(
        "--version", action="version", version="{} v{}".format(prog_name, version)
    )
    parser.add_argument("-d", "--debug", action="store_true", help="show debug info")
    parser.add_argument(
        "-lr",
        "--list-runs",
        action="store_true",
        default=False,
        help="Lista las ejecuciones del mes actual",
    )
    parser.add_argument(
        "-lm",
        "--last-month",
        action="store_true",
        default=False,
        help="Lista las ejecuciones del mes anterior",
    )
    parser.add_argument(
        "-ar",
        "--all-runs",
        action="store_true",
        default=False,
        help="Lista todas las ejecuciones",
    )

    common = _common_parser()
    subparsers = parser.add_subparsers(dest="command")

    gen_parser = subparsers.add_parser("gen-data", parents=[common], help="Genera un conjunto sintético")
    gen_parser.set_defaults(func=gen_data)
    gen_parser.add_argument("-o", "--out", required=True, help="Directorio de salida")
    gen_parser.add_argument("-n", "--num-samples", type=int, default=None, help="Cantidad de muestras")

    label_parser = subparsers.add_parser("pseudo-label", parents=[common], help="Extrae pseudo-etiquetas")
    label_parser.set_defaults(func=pseudo_label)
    label_parser.add_argument("-m", "--manifest", required=True, help="Manifiesto con los reportes")
    label_parser.add_argument("-o", "--out", required=True, help="Directorio de salida")
    label_parser.add_argument("--min-cluster-size", type=int, default=5, help="Tamaño mínimo de grupo")

    seg_parser = subparsers.add_parser("train-seg", parents=[common], help="Entrena el segmentador")
    seg_parser.set_defaults(func=train_seg)
    seg_parser.add_argument("--train", required=True, help="Manifiesto de entrenamiento")
    seg_parser.add_argument("--val", help="Manifiesto de validación")
    seg_parser.add_argument("-o", "--out", required=True, help="Directorio de salida")
    seg_parser.add_argument(
        "--report-source",
        choices=("ground-truth", "empty", "synthesized"),
        default=None,
        help="Texto de entrada durante el entrenamiento",
    )
    seg_parser.add_argument("-q", "--quiet", action="store_true", help="Sin barra de progreso")

    det_parser = subparsers.add_parser("train-det", parents=[common], help="Entrena el detector")
    det_parser.set_defaults(func=train_det)
    det_parser.add_argument("--train", required=True, help="Manifiesto de entrenamiento")
    det_parser.add_argument("--labels", required=True, help="Archivo de pseudo-etiquetas")
    det_parser.add_argument("--val", help="Manifiesto de validación")
    det_parser.add_argument("-o", "--out", required=True, help="Directorio de salida")
    det_parser.add_argument("--architecture", choices=("lerg", "simple"), default=None)
    det_parser.add_argument("-q", "--quiet", action="store_true", help="Sin barra de progreso")

    infer_parser = subparsers.add_parser("infer", parents=[common], help="Segmenta una imagen")
    infer_parser.set_defaults(func=infer)
    infer_parser.add_argument("-i", "--image", required=True, help="Imagen de entrada")
    infer_parser.add_argument("--seg-ckpt", required=True, help="Checkpoint del segmentador")
    infer_parser.add_argument("--det-ckpt", help="Checkpoint del detector")
    infer_parser.add_argument("--mode", choices=("text-free", "self-guided", "full-text"), default=None)
    infer_parser.add_argument("--report", default=None, help="Reporte de referencia (modo full-text)")
    infer_parser.add_argument("--mask", help="Máscara de referencia para calcular métricas")
    infer_parser.add_argument("--tau", type=_tau, default=0.5, help="Umbral del detector")
    infer_parser.add_argument("-o", "--out", required=True, help="Directorio de salida")

    eval_parser = subparsers.add_parser("eval", parents=[common], help="Evalúa un modo")
    eval_parser.set_defaults(func=evaluate)
    eval_parser.add_argument("-m", "--manifest", required=True, help="Manifiesto de prueba")
    eval_parser.add_argument("--seg-ckpt", required=True, help="Checkpoint del segmentador")
    eval_parser.add_argument("--det-ckpt", help="Checkpoint del detector")
    eval_parser.add_argument("--mode", choices=MODES, default="self-guided")
    eval_parser.add_argument("--tau", type=_tau, default=0.5, help="Umbral del detector")
    eval_parser.add_argument("-o", "--out", required=True, help="Directorio de salida")

    ablate_parser = subparsers.add_parser("ablate", parents=[common], help="Compara los modos de texto")
    ablate_parser.set_defaults(func=ablate)
    ablate_parser.add_argument("-m", "--manifest", required=True, help="Manifiesto de prueba")
    ablate_parser.add_argument("--seg-ckpt", required=True, help="Checkpoint del segmentador")
    ablate_parser.add_argument("--det-ckpt", help="Checkpoint del detector")
    ablate_parser.add_argument("--text-free-ckpt", help="Segmentador entrenado sin texto")
    ablate_parser.add_argument("--simple-det-ckpt", help="Detector simple (modo self-guided-simple)")
    ablate_parser.add_argument(
        "--modes", default="text-free,self-guided,full-text", help="Modos separados por coma"
    )
    ablate_parser.add_argument("--tau", type=_tau, default=0.5, help="Umbral del detector")
    ablate_parser.add_argument("-o", "--out", required=True, help="Directorio de salida")

    viz_parser = subparsers.add_parser("attn-viz", parents=[common], help="Exporta mapas de atención")
    viz_parser.set_defaults(func=attn_viz)
    viz_parser.add_argument("-m", "--manifest", required=True, help="Manifiesto con la muestra")
    viz_parser.add_argument("--index", type=int, default=0, help="Posición de la muestra")
    viz_parser.add_argument("--seg-ckpt", required=True, help="Checkpoint del segmentador")
    viz_parser.add_argument("--det-ckpt", help="Usar el reporte generado por este detector")
    viz_parser.add_argument("--tau", type=_tau, default=0.5, help="Umbral del detector")
    viz_parser.add_argument("-o", "--out", required=True, help="Directorio de salida")

    return parser


def list_runs_cli(args):
    if args.last_month:
        runs = list_runs_last_month()
    elif args.all_runs:
        runs = list_runs()
    else:
        runs = list_runs_current_month()

    if not runs:
        print("No se encontraron ejecuciones.")
        return
    print(format_runs(runs))


def _report_error(ex):
    message = ex.args[0] if isinstance(ex, SGSegException) else str(ex)
    print(message, file=sys.stderr)
    if isinstance(ex, DataValidationException):
        for error in ex.errors:
            print("  {}".format(error), file=sys.stderr)
    if isinstance(ex, UsageException):
        return EXIT_USAGE
    if isinstance(ex, NumericException):
        return EXIT_NUMERIC
    return EXIT_DATA


def run(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageException as ex:
        print(ex.args[0], file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as ex:
        # --help / --version
        return ex.code or EXIT_OK

    logging.basicConfig(level=logging.DEBUG if args.debug else logging.WARNING)

    # Chequeo que usen --last-month / --all-runs con --list-runs
    if (args.last_month or args.all_runs) and not args.list_runs:
        print("--last-month y --all-runs requieren --list-runs", file=sys.stderr)
        return EXIT_USAGE

    if args.list_runs:
        list_runs_cli(args)
        return EXIT_OK

    if "func" not in args:
        parser.print_help()
        return EXIT_USAGE

    try:
        args.config_mapping = _load_config(args)
    except (SGSegException, OSError) as ex:
        return _report_error(ex)

    run_id = None
    if not args.no_log:
        try:
            run_id = save_run_start(args.command, config_hash(args.config_mapping), _seed(args))
        except sqlite3.Error as ex:
            logger.warning("Run ledger unavailable: %s", ex)

    try:
        args.func(args)
        code = EXIT_OK
    except (SGSegException, OSError) as ex:
        code = _report_error(ex)

    if run_id is not None:
        try:
            save_run_end(run_id, code)
        except sqlite3.Error as ex:
            logger.warning("Run ledger unavailable: %s", ex)
    return code


def main():
    sys.exit(run())
