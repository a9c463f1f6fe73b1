"""
报告观察器
在终端展示配置检查、Oracle表格、扫描汇总与单次训练结果
"""

import logging
import os
from datetime import datetime
from typing import Any, Dict, List, Optional

import pandas as pd
from rich.console import Console
from rich.table import Table

try:
    from colorama import init, Fore, Style
    init(autoreset=True)
    COLORAMA_AVAILABLE = True
except ImportError:
    COLORAMA_AVAILABLE = False
    # 如果没有colorama，定义空的样式
    class DummyStyle:
        RESET_ALL = ""
        BRIGHT = ""
        DIM = ""

    class DummyFore:
        RED = ""
        GREEN = ""
        YELLOW = ""
        BLUE = ""
        MAGENTA = ""
        CYAN = ""
        WHITE = ""
        RESET = ""

    Fore = DummyFore()
    Style = DummyStyle()

from .oracle import FAMILY_ORDER
from .trainer import RunResult


class ReportObserver:
    """终端报告"""

    def __init__(self, config: Optional[Dict[str, Any]] = None, console: Optional[Console] = None):
        """
        Args:
            config: 完整配置
            console: rich 控制台（测试时可传入写入内存的控制台）
        """
        self.config = config or {}
        self.console = console or Console()
        self.logger = logging.getLogger(__name__)

        self.display_buffer: List[Dict[str, str]] = []
        self.max_buffer_size = 1000

        self.status_colors = {
            "ok": Fore.GREEN,
            "warning": Fore.YELLOW,
            "error": Fore.RED + Style.BRIGHT,
            "info": Fore.CYAN,
        }

    def display_banner(self, command: str) -> None:
        self._print_header("CMNIST+ IRM 实验室")
        es = self.config.get("experiment_settings", {})
        print(f"{Fore.CYAN}命令: {command}")
        print(f"  输出目录: {es.get('output_dir', 'results')}")
        print(f"  根种子: {es.get('root_seed', 0)}")
        print(f"  并发数: {es.get('jobs', 1)}")
        self._print_separator()
        self._add_to_buffer("banner", command)

    def display_config_check(self, validation: Dict[str, Any], suggestions: List[str]) -> None:
        """显示配置校验结果与修复建议"""
        if validation.get("is_valid"):
            print(f"{self.status_colors['ok']}配置验证通过")
            self._add_to_buffer("config_check", "通过")
            return
        print(f"{self.status_colors['warning']}配置存在问题:")
        for section in ("dataset_settings", "train_settings"):
            for issue in validation.get(section, {}).get("issues", []):
                print(f"   - {issue}")
        if suggestions:
            print("   - 修复建议:")
            for suggestion in suggestions:
                print(f"     * {suggestion}")
        self._add_to_buffer("config_check", f"{len(suggestions)}条建议")

    def display_oracle_table(self, frame: pd.DataFrame) -> None:
        """
        以 ρ 为行、特征族为列展示验证/测试准确率，获胜者加粗

        Args:
            frame: oracle_frame 的输出
        """
        for balanced in (False, True):
            part = frame[frame["balanced"] == balanced]
            if part.empty:
                continue
            title = "类别平衡 P(Y|E)=0.5" if balanced else "原始分布"
            table = Table(title=f"Oracle 准确率（{title}）")
            table.add_column("ρ", justify="right")
            for family in FAMILY_ORDER:
                table.add_column(family.value, justify="center")
            for rho, rows in part.groupby("rho", sort=True):
                cells = []
                for family in FAMILY_ORDER:
                    row = rows[rows["family"] == family.value].iloc[0]
                    text = f"{row['val_acc']:.3f}/{row['test_acc']:.3f}"
                    cells.append(f"[bold]{text}[/bold]" if row["winner_flag"] else text)
                table.add_row(f"{rho:g}" if pd.notna(rho) else "-", *cells)
            self.console.print(table)
        self._add_to_buffer("oracle_table", f"{len(frame)}行")

    def display_summary(self, frame: pd.DataFrame, title: str, columns: Optional[List[str]] = None) -> None:
        """通用汇总表"""
        columns = columns or list(frame.columns)
        table = Table(title=title)
        for column in columns:
            table.add_column(str(column))
        for _, row in frame.iterrows():
            table.add_row(*[_format_cell(row[c]) for c in columns])
        self.console.print(table)
        self._add_to_buffer("summary", title)

    def display_run_result(self, result: RunResult) -> None:
        name = result.config.method.display_name
        if result.failed:
            print(f"{self.status_colors['error']}{name} seed={result.seed} 失败: {result.failure_reason}")
        else:
            print(f"{self.status_colors['info']}{name} seed={result.seed}: "
                  f"选中第{result.selected_iteration}次迭代，"
                  f"val_acc={result.val_acc:.3f}, test_acc={result.test_acc:.3f}")
        self._add_to_buffer("run", f"{name} seed={result.seed} failed={result.failed}")

    def display_error(self, record: Dict[str, Any]) -> None:
        print(f"{self.status_colors['error']}错误[{record.get('error')}]: {record.get('message')}")
        self._add_to_buffer("error", str(record))

    def _print_header(self, title: str) -> None:
        """打印标题头"""
        print(f"\n{Style.BRIGHT}{Fore.YELLOW}{'=' * 60}")
        print(f"{Style.BRIGHT}{Fore.YELLOW}{title:^60}")
        print(f"{Style.BRIGHT}{Fore.YELLOW}{'=' * 60}")

    def _print_separator(self) -> None:
        dim_style = getattr(Style, "DIM", "") if COLORAMA_AVAILABLE else ""
        print(f"{dim_style}{'-' * 60}{Style.RESET_ALL if COLORAMA_AVAILABLE else ''}")

    def _add_to_buffer(self, event_type: str, content: str) -> None:
        self.display_buffer.append({
            "timestamp": datetime.now().isoformat(),
            "event_type": event_type,
            "content": content,
        })
        if len(self.display_buffer) > self.max_buffer_size:
            self.display_buffer = self.display_buffer[-self.max_buffer_size:]

    def save_report_log(self, out_dir: str) -> str:
        """
        保存终端事件日志

        Returns:
            保存的文件路径，失败时为空字符串
        """
        filename = os.path.join(out_dir, "observer.log")
        os.makedirs(out_dir, exist_ok=True)
        try:
            with open(filename, "w", encoding="utf-8") as f:
                for entry in self.display_buffer:
                    f.write(f"[{entry['timestamp']}] {entry['event_type']}: {entry['content']}\n")
            return filename
        except OSError as e:
            self.logger.error(f"保存日志失败: {e}")
            return ""


def _format_cell(value: Any) -> str:
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)
