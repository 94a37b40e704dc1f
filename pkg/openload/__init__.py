# OpenLoad Core Package
"""
OpenLoad - Multi-Task Electricity Demand Forecasting
多任务电力负荷长期预测：日历特征核回归、独立核岭回归与低秩输出核学习
"""

__version__ = "0.1.0"
__author__ = "OpenLoad Team"
