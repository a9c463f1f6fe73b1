#!/usr/bin/env python3
"""
CMNIST+ IRM 实验室主启动文件
解析Oracle表格、ρ/插值扫描、方法对比与单次训练
"""

import argparse
import json
import logging
import sys
from typing import Any, Dict, List, Optional

from pydantic import ValidationError
from rich.logging import RichHandler

from src.config_validator import ConfigValidator
from src.errors import ConfigError, LabError
from src.experiment_runner import COMMANDS, run_command
from src.report_observer import ReportObserver


EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="IRM failure laboratory on CMNIST+ style data")
    parser.add_argument("command", choices=COMMANDS, help="要执行的命令")
    parser.add_argument("--config", default="config.json", help="配置文件路径")
    parser.add_argument("--out", help="输出目录")
    parser.add_argument("--seed", type=int, help="根种子")
    parser.add_argument("--jobs", type=int, help="并发线程数")
    parser.add_argument("--rho", type=float, nargs="+", help="ρ 取值（覆盖配置中的网格）")
    parser.add_argument("--w-plus", dest="w_plus", type=float, nargs="+", help="w_plus 取值")
    parser.add_argument("--p-ye", dest="p_ye", type=float, nargs="+", help="p_ye 取值")
    parser.add_argument("--method", nargs="+", help="训练方法")
    parser.add_argument("--balanced", choices=["yes", "no", "both"], help="Oracle 表的平衡设定")
    parser.add_argument("--test-spec", dest="test_spec", choices=["cmnist_plus", "cmnist", "both"],
                        help="插值族使用的测试环境")
    parser.add_argument("--k-irm", dest="k_irm", type=int, help="IRM 惩罚启用的迭代")
    parser.add_argument("--dry-run", action="store_true", help="只校验配置，不执行")
    parser.add_argument("--log-level", dest="log_level", help="日志级别")
    return parser


def setup_logging(level: str, log_file: Optional[str]) -> None:
    handlers: List[logging.Handler] = [RichHandler(rich_tracebacks=True, show_path=False)]
    if log_file:
        handlers.append(logging.FileHandler(log_file, encoding="utf-8"))
    logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO),
                        format="%(name)s: %(message)s", handlers=handlers, force=True)


def collect_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    balanced = {"yes": True, "no": False}.get(args.balanced)
    return {
        "out": args.out,
        "seed": args.seed,
        "jobs": args.jobs,
        "rho": args.rho,
        "w_plus": args.w_plus,
        "p_ye": args.p_ye,
        "method": args.method,
        "balanced": balanced,
        "test_spec": args.test_spec,
        "k_irm": args.k_irm,
    }


def check_config(validator: ConfigValidator, config: Dict[str, Any], observer: ReportObserver) -> None:
    """校验配置，不通过时抛出 ConfigError"""
    validation = validator.validate_all(config)
    suggestions = validator.suggest_config_fixes(validation)
    observer.display_config_check(validation, suggestions)
    if not validation["is_valid"]:
        issues = validation["dataset_settings"]["issues"] + validation["train_settings"]["issues"]
        raise ConfigError("; ".join(issues))


def error_record(exc: BaseException, command: str) -> Dict[str, Any]:
    return {"error": type(exc).__name__, "message": str(exc), "command": command}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    validator = ConfigValidator(args.config)
    config = validator.load_config()
    logging_settings = config["logging_settings"]
    setup_logging(args.log_level or logging_settings["level"], logging_settings["log_file"])

    observer = ReportObserver(config)
    observer.display_banner(args.command)
    try:
        check_config(validator, config, observer)
        if args.dry_run:
            print(json.dumps({"command": args.command, "dry_run": True, "is_valid": True}))
            return EXIT_OK
        result = run_command(config, args.command, collect_overrides(args), observer)
        print(json.dumps(result, ensure_ascii=False))
        return EXIT_OK
    except (ConfigError, ValidationError) as exc:
        record = error_record(exc, args.command)
        observer.display_error(record)
        print(json.dumps(record, ensure_ascii=False), file=sys.stderr)
        return EXIT_CONFIG
    except LabError as exc:
        record = error_record(exc, args.command)
        observer.display_error(record)
        print(json.dumps(record, ensure_ascii=False), file=sys.stderr)
        return EXIT_FAILURE
    except Exception as exc:
        logging.getLogger(__name__).exception("未预期的错误")
        print(json.dumps(error_record(exc, args.command), ensure_ascii=False), file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
