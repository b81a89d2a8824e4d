"""
服务层模块
检索、融合、裁剪模型、训练、评估、弱监督数据生成与导出
"""
