# IRM三角伪相关实验室 - 源代码包
# IRM Triangle-Spuriousness Lab - Source Code Package

__version__ = "1.0.0"
__description__ = "CMNIST+数据族、解析oracle与IRM/CDM训练的实验工具"
