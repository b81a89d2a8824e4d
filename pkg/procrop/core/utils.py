"""
工具函数模块
包含随机种子派生、哈希、文件枚举等通用工具函数
"""
import hashlib
import json
import re
from pathlib import Path
from typing import Any, List

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".webp")


def derive_seed(seed: int, name: str) -> int:
    """从全局种子和子流名称派生一个 32 位种子"""
    digest = hashlib.sha256(f"{int(seed)}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def canonical_hash(obj: Any) -> str:
    """键顺序无关的 JSON 哈希"""
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return sha256_bytes(text.encode("utf-8"))


def list_images(directory) -> List[Path]:
    """按文件名排序列出目录中的图片"""
    root = Path(directory)
    return sorted(p for p in root.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def image_id_from_path(path) -> str:
    return Path(path).stem


def tokenize_caption(text: str) -> List[str]:
    """文字描述分词（小写单词）"""
    if not text:
        return []
    return re.findall(r"\w+", text.lower())


def parse_int_list(text: str) -> List[int]:
    """解析 "1,2,5,10" 形式的整数列表"""
    return [int(part) for part in text.split(",") if part.strip()]
