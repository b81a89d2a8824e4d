"""
控制器模块
把命令行子命令分派给各个服务
"""
