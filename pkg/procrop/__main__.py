"""
ProCrop 裁剪助手命令行入口
支持 python -m procrop 运行
"""
import argparse
import json
import logging
import logging.handlers
import sys
from pathlib import Path
from typing import Dict, List, Optional

from .controllers.main_controller import MainController
from .core.config_manager import LoggingSettings, RunConfig, parse_config
from .core.exceptions import ConfigurationError, ProCropError
from .core.utils import parse_int_list
from .services.data_exporter import DataExporter

logger = logging.getLogger("procrop")


def setup_logging(settings: LoggingSettings, verbose: bool = False):
    """设置日志系统：滚动文件 + 标准错误输出（标准输出留给 --json 结果）"""
    log_path = Path(settings.file_path)
    log_path.parent.mkdir(parents=True, exist_ok=True)
    level = logging.DEBUG if verbose else getattr(logging, settings.level.upper())

    # 配置日志
    logging.basicConfig(
        level=level,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        handlers=[
            logging.handlers.RotatingFileHandler(
                log_path,
                maxBytes=settings.max_file_size,
                backupCount=settings.backup_count,
                encoding="utf-8",
            ),
            logging.StreamHandler(sys.stderr),
        ],
        force=True,
    )
    logging.getLogger(__name__).debug("日志系统初始化完成")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI 配置文件")
    common.add_argument("--seed", type=int, help="覆盖 run.seed")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.OPTION=VALUE", help="覆盖任意配置项")
    common.add_argument("--json", action="store_true", help="以 JSON 输出结果")
    common.add_argument("--verbose", action="store_true", help="输出调试日志")

    parser = argparse.ArgumentParser(prog="procrop", description="检索增强的美学图像裁剪")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-index", parents=[common], help="构建构图特征检索库")
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--src", "--images", dest="src", help="参考图像目录")
    source.add_argument("--embeddings", help="预计算的嵌入缓存文件（等价于 --encoder file:<FILE>）")
    p.add_argument("--out", required=True, help="索引文件路径")
    p.add_argument("--encoder", help="编码器，例如 line-hist:8,8 或 file:<path>")
    p.add_argument("--similarity", choices=["pooled", "token"])

    p = sub.add_parser("retrieve", parents=[common], help="检索相似构图")
    p.add_argument("--index", required=True)
    p.add_argument("--image", "--query", dest="image", required=True)
    p.add_argument("--k", type=int)
    p.add_argument("--exclude-self", action="store_true", default=None, help="结果中排除查询图像自身")

    p = sub.add_parser("train", parents=[common], help="训练裁剪模型")
    p.add_argument("--data", required=True, help="数据集目录（annotations.jsonl + images/）")
    p.add_argument("--index", help="检索库（fusion.mode 为 none 时可省略）")
    p.add_argument("--out", required=True, help="检查点路径")

    p = sub.add_parser("predict", parents=[common], help="预测裁剪")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--index")
    target = p.add_mutually_exclusive_group(required=True)
    target.add_argument("--image")
    target.add_argument("--data")
    p.add_argument("--topk", type=int, default=3)
    p.add_argument("--render", help="叠加图输出路径（PNG）")
    p.add_argument("--out", help="预测 JSONL 输出路径")
    p.add_argument("--k", type=int, help="推理时的检索数量")

    p = sub.add_parser("evaluate", parents=[common], help="评估预测结果")
    evaluated = p.add_mutually_exclusive_group(required=True)
    evaluated.add_argument("--pred", help="预测 JSONL")
    evaluated.add_argument("--baseline", choices=["anchor"], help="用随机排序的网格锚框代替预测")
    p.add_argument("--ann", required=True)
    p.add_argument("--eps", type=float)
    p.add_argument("--out", help="报告输出（.json/.csv/.xlsx/.txt）")
    p.add_argument("--gt-only", action="store_true", help="只以 gt_region 作为标注（弱监督数据）")

    p = sub.add_parser("genweak", parents=[common], help="生成弱监督数据集")
    p.add_argument("--src", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("refine", parents=[common], help="伪标签精炼")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index")
    p.add_argument("--rounds", type=int)

    p = sub.add_parser("report", parents=[common], help="打印/导出评估报告")
    p.add_argument("--report", required=True, help="evaluate 生成的 JSON 报告")
    p.add_argument("--out")

    p = sub.add_parser("sweep", parents=[common], help="推理时检索数量扫描")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--index")
    p.add_argument("--data", required=True)
    p.add_argument("--ks", default="1,5,10", help="逗号分隔的 K 列表")
    p.add_argument("--out")
    return parser


def load_run_config(args: argparse.Namespace) -> RunConfig:
    overrides: Dict[str, str] = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigurationError(f"--set 需要 SECTION.OPTION=VALUE 形式: {item}", config_key=item)
        overrides[key.strip()] = value.strip()
    if args.seed is not None:
        overrides["run.seed"] = str(args.seed)
    return parse_config(args.config, overrides)


def run_command(controller: MainController, args: argparse.Namespace):
    """执行子命令，返回 (JSON 结果, 文本输出)"""
    exporter = DataExporter()
    command = args.command
    if command == "build-index":
        result = controller.build_index(
            args.src, args.out, f"file:{args.embeddings}" if args.embeddings else args.encoder, args.similarity
        )
        return result, f"索引已保存: {result['index']}（{result['count']} 条, m={result['m']}, d={result['d']}）"
    if command == "retrieve":
        result = controller.retrieve(args.index, args.image, args.k, args.exclude_self)
        return result, exporter.table_text(result["neighbors"], columns=["id", "similarity"])
    if command == "train":
        result = controller.train(args.data, args.out, args.index)
        return result, f"检查点已保存: {result['checkpoint']}（{result['epochs']} 轮, 最终损失 {result['final_loss']:.6f}）"
    if command == "predict":
        result = controller.predict(
            args.ckpt, args.index, args.image, args.data, args.topk, args.render, args.out, args.k
        )
        if "proposals" in result:
            rows = [{"rank": i + 1, "box": p["box"], "score": p["score"]} for i, p in enumerate(result["proposals"])]
            return result, exporter.table_text(rows, columns=["rank", "box", "score"])
        return result, f"预测已保存: {result['predictions']}（{result['images']} 张图像）"
    if command == "evaluate":
        report = controller.evaluate(args.pred, args.ann, args.eps, args.out, args.gt_only, args.baseline)
        return report.to_dict(), exporter.report_summary(report)
    if command == "genweak":
        result = controller.genweak(args.src, args.out)
        return result, f"弱监督数据已生成: {result['out']}（{result['pairs']} 个样本, 跳过 {len(result['skipped'])} 张）"
    if command == "refine":
        result = controller.refine(args.ckpt, args.data, args.index, args.rounds)
        return result, f"伪标签精炼完成: 平均 {result['mean_labels']:.2f} 个标签, 最大两两 IoU {result['max_pairwise_iou']:.4f}"
    if command == "report":
        report = controller.report(args.report, args.out)
        return report.to_dict(), exporter.report_summary(report)
    if command == "sweep":
        rows = controller.sweep(args.ckpt, args.index, args.data, parse_int_list(args.ks), args.out)
        return {"rows": rows}, exporter.table_text(rows)
    raise ConfigurationError(f"未知的子命令: {command}")


def main(argv: Optional[List[str]] = None) -> int:
    """主函数，返回退出码"""
    args = build_parser().parse_args(argv)
    try:
        config = load_run_config(args)
        setup_logging(config.logging, args.verbose)
        logger.info(f"执行 {args.command}（seed={config.run.seed}, config={config.config_hash()[:12]}）")
        result, text = run_command(MainController(config), args)
    except ProCropError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except OSError as e:
        logger.error(f"I/O 错误: {e}")
        return 3
    except Exception as e:
        logger.exception(f"执行失败: {e}")
        return 1

    if args.json:
        print(json.dumps(result, ensure_ascii=False, sort_keys=True, indent=2))
    else:
        print(text)
    return 0


if __name__ == "__main__":
    sys.exit(main())
