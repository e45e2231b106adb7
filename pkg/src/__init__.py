# GROWN+UP 网页图学习工具
__version__ = '0.1.0'
