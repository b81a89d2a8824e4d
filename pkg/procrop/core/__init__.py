"""
核心模块：配置、异常、数据模型与几何运算
"""
